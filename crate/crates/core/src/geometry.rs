//! Point clouds and the point <-> voxel <-> patch-token conversions.
//!
//! Voxel grids are node-based: a grid of resolution `V` has `V` nodes per
//! axis spanning the closed cube `[-extent, extent]`, so node `i` sits at
//! `-extent + i * 2 * extent / (V - 1)`. Points are splatted onto the eight
//! nodes of their enclosing cell with trilinear weights and read back with
//! the same stencil.

use thiserror::Error;

pub type Point = [f64; 3];

/// Voxel resolutions the model supports.
pub const ALLOWED_RESOLUTIONS: [usize; 3] = [16, 32, 64];

/// Occupancy below this is treated as an empty node.
pub const OCCUPANCY_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no point clouds given")]
    EmptyCollection,
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },
    #[error("cannot sample {k} points from a cloud of {n}")]
    SampleTooLarge { k: usize, n: usize },
    #[error("voxel resolution {0} not in {ALLOWED_RESOLUTIONS:?}")]
    Resolution(usize),
    #[error("patch size {p} does not divide resolution {v}")]
    PatchSize { v: usize, p: usize },
    #[error("token buffer has {got} values, expected {expected}")]
    TokenLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    id: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self { points, id: None })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn id(&self) -> Option<&str> {
        self.id.as_deref()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flattened `N x 3` row-major coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self, GeometryError> {
        Self::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Subset by index, keeping the id.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            id: self.id.clone(),
        }
    }

    /// Largest pairwise Euclidean distance.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max(dist(a, b));
            }
        }
        best
    }
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

/// The shared affine map produced by [`normalize`]: `x' = (x - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: Point,
    pub scale: f64,
}

impl NormStats {
    pub fn apply(&self, p: &Point) -> Point {
        [
            (p[0] - self.mean[0]) / self.scale,
            (p[1] - self.mean[1]) / self.scale,
            (p[2] - self.mean[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: &Point) -> Point {
        [
            p[0] * self.scale + self.mean[0],
            p[1] * self.scale + self.mean[1],
            p[2] * self.scale + self.mean[2],
        ]
    }
}

/// Dataset-wide normalization: subtract the per-axis mean over every point of
/// every cloud, then divide by the standard deviation of all centered
/// coordinates pooled together. One map is applied to all clouds.
pub fn normalize(clouds: &[PointCloud]) -> Result<(Vec<PointCloud>, NormStats), GeometryError> {
    if clouds.is_empty() {
        return Err(GeometryError::EmptyCollection);
    }
    let mut count = 0usize;
    let mut sum = [0.0; 3];
    for cloud in clouds {
        if cloud.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        for (index, p) in cloud.points.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(GeometryError::NonFinite { index });
            }
            for a in 0..3 {
                sum[a] += p[a];
            }
        }
        count += cloud.len();
    }
    let mean = sum.map(|s| s / count as f64);
    let mut sq = 0.0;
    for p in clouds.iter().flat_map(|c| c.points.iter()) {
        for a in 0..3 {
            sq += (p[a] - mean[a]).powi(2);
        }
    }
    let std = (sq / (3 * count) as f64).sqrt();
    let scale = if std > 0.0 { std } else { 1.0 };
    let stats = NormStats { mean, scale };
    let out = clouds
        .iter()
        .map(|c| PointCloud {
            points: c.points.iter().map(|p| stats.apply(p)).collect(),
            id: c.id.clone(),
        })
        .collect();
    Ok((out, stats))
}

/// Greedy max-min landmark selection. The first index is `seed mod N`; each
/// following index maximizes the distance to the selected set, ties going to
/// the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<Vec<usize>, GeometryError> {
    let n = cloud.len();
    if k > n {
        return Err(GeometryError::SampleTooLarge { k, n });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let pts = cloud.points();
    let first = (seed % n as u64) as usize;
    let mut selected = Vec::with_capacity(k);
    selected.push(first);
    let mut min_d: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[first])).collect();
    while selected.len() < k {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        let chosen = pts[best];
        for (d, p) in min_d.iter_mut().zip(pts) {
            *d = d.min(dist2(p, &chosen));
        }
    }
    Ok(selected)
}

/// Splatted coordinate field on a `V^3` node lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    extent: f64,
    /// `V x V x V x 3`, x index slowest.
    coords: Vec<f64>,
    /// `V x V x V`.
    occupancy: Vec<f64>,
}

impl VoxelGrid {
    /// Dense field with unit occupancy.
    pub fn from_coords(resolution: usize, extent: f64, coords: Vec<f64>) -> Result<Self, GeometryError> {
        check_resolution(resolution)?;
        let cells = resolution.pow(3);
        if coords.len() != cells * 3 {
            return Err(GeometryError::TokenLength { got: coords.len(), expected: cells * 3 });
        }
        Ok(Self { resolution, extent, coords, occupancy: vec![1.0; cells] })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn occupancy(&self) -> &[f64] {
        &self.occupancy
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Point {
        let h = 2.0 * self.extent / (self.resolution - 1) as f64;
        [-self.extent + i as f64 * h, -self.extent + j as f64 * h, -self.extent + k as f64 * h]
    }
}

fn check_resolution(v: usize) -> Result<(), GeometryError> {
    if ALLOWED_RESOLUTIONS.contains(&v) {
        Ok(())
    } else {
        Err(GeometryError::Resolution(v))
    }
}

/// The eight node indices and trilinear weights around a position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

/// Trilinear stencil of `p` on a `resolution^3` lattice over `[-extent, extent]^3`.
/// Out-of-domain coordinates are clamped onto the boundary.
pub fn trilinear_stencil(p: &Point, resolution: usize, extent: f64) -> Stencil {
    let cells = (resolution - 1) as f64;
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let c = p[a].clamp(-extent, extent);
        let u = (c + extent) / (2.0 * extent) * cells;
        let b = (u.floor() as usize).min(resolution - 2);
        base[a] = b;
        frac[a] = u - b as f64;
    }
    let mut nodes = [0usize; 8];
    let mut weights = [0.0f64; 8];
    for corner in 0..8 {
        let (di, dj, dk) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
        let wx = if di == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dj == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dk == 1 { frac[2] } else { 1.0 - frac[2] };
        nodes[corner] = ((base[0] + di) * resolution + base[1] + dj) * resolution + base[2] + dk;
        weights[corner] = wx * wy * wz;
    }
    Stencil { nodes, weights }
}

/// Voxelize onto `[-1, 1]^3`.
pub fn voxelize(cloud: &PointCloud, resolution: usize) -> Result<VoxelGrid, GeometryError> {
    voxelize_in(cloud, resolution, 1.0)
}

/// Trilinear splat of every point's own coordinates onto the node lattice
/// over `[-extent, extent]^3`. Positions are clamped into the domain; the
/// splatted value is the point's unclamped coordinate. Node values are
/// occupancy-weighted averages.
pub fn voxelize_in(cloud: &PointCloud, resolution: usize, extent: f64) -> Result<VoxelGrid, GeometryError> {
    check_resolution(resolution)?;
    let cells = resolution.pow(3);
    let mut coords = vec![0.0; cells * 3];
    let mut occupancy = vec![0.0; cells];
    for p in cloud.points() {
        let s = trilinear_stencil(p, resolution, extent);
        for (&node, &w) in s.nodes.iter().zip(&s.weights) {
            occupancy[node] += w;
            for a in 0..3 {
                coords[node * 3 + a] += w * p[a];
            }
        }
    }
    for (node, &occ) in occupancy.iter().enumerate() {
        for a in 0..3 {
            let c = &mut coords[node * 3 + a];
            *c = if occ > OCCUPANCY_EPS { *c / occ } else { 0.0 };
        }
    }
    Ok(VoxelGrid { resolution, extent, coords, occupancy })
}

/// Trilinear interpolation of the coords field at each position.
pub fn devoxelize(grid: &VoxelGrid, positions: &PointCloud) -> Vec<Point> {
    positions
        .points()
        .iter()
        .map(|p| {
            let s = trilinear_stencil(p, grid.resolution, grid.extent);
            let mut out = [0.0; 3];
            for (&node, &w) in s.nodes.iter().zip(&s.weights) {
                for a in 0..3 {
                    out[a] += w * grid.coords[node * 3 + a];
                }
            }
            out
        })
        .collect()
}

/// `L x (3 p^3)` patch tokens. Tokens are ordered row-major over the
/// `(V/p)^3` patch lattice; inside a token, voxels are row-major with the
/// three channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub values: Vec<f64>,
    pub patch: usize,
    pub count: usize,
}

impl PatchTokens {
    pub fn width(&self) -> usize {
        3 * self.patch.pow(3)
    }
}

/// Number of patch tokens `(V/p)^3`.
pub fn token_count(resolution: usize, patch: usize) -> Result<usize, GeometryError> {
    if patch == 0 || resolution % patch != 0 {
        return Err(GeometryError::PatchSize { v: resolution, p: patch });
    }
    Ok((resolution / patch).pow(3))
}

/// `perm[t]` is the index into the flat `V^3 x 3` coords buffer that lands at
/// position `t` of the flat token buffer.
pub fn patch_permutation(resolution: usize, patch: usize) -> Result<Vec<usize>, GeometryError> {
    token_count(resolution, patch)?;
    let g = resolution / patch;
    let mut perm = Vec::with_capacity(resolution.pow(3) * 3);
    for a in 0..g {
        for b in 0..g {
            for c in 0..g {
                for i in 0..patch {
                    for j in 0..patch {
                        for k in 0..patch {
                            let node = ((a * patch + i) * resolution + b * patch + j) * resolution + c * patch + k;
                            perm.extend([node * 3, node * 3 + 1, node * 3 + 2]);
                        }
                    }
                }
            }
        }
    }
    Ok(perm)
}

pub fn patchify(grid: &VoxelGrid, patch: usize) -> Result<PatchTokens, GeometryError> {
    let count = token_count(grid.resolution, patch)?;
    let perm = patch_permutation(grid.resolution, patch)?;
    Ok(PatchTokens { values: perm.iter().map(|&i| grid.coords[i]).collect(), patch, count })
}

/// Inverse of [`patchify`]. The result is a dense field with unit occupancy.
pub fn unpatchify(tokens: &PatchTokens, resolution: usize, extent: f64) -> Result<VoxelGrid, GeometryError> {
    check_resolution(resolution)?;
    let perm = patch_permutation(resolution, tokens.patch)?;
    if tokens.values.len() != perm.len() {
        return Err(GeometryError::TokenLength { got: tokens.values.len(), expected: perm.len() });
    }
    let mut coords = vec![0.0; perm.len()];
    for (t, &i) in perm.iter().enumerate() {
        coords[i] = tokens.values[t];
    }
    VoxelGrid::from_coords(resolution, extent, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_clouds() {
        assert_eq!(PointCloud::new(vec![]), Err(GeometryError::EmptyCloud));
        assert_eq!(
            PointCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]),
            Err(GeometryError::NonFinite { index: 1 })
        );
        assert_eq!(normalize(&[]).unwrap_err(), GeometryError::EmptyCollection);
    }

    #[test]
    fn normalize_symmetric_pair() {
        let (out, stats) = normalize(&[cloud(&[[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]])]).unwrap();
        assert_eq!(stats.mean, [0.0; 3]);
        assert!((stats.scale - 1.0).abs() < 1e-15);
        assert_eq!(out[0].points()[0], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalize_is_identity_on_normalized_data() {
        let mut r = rng::stream(1, "t");
        let clouds: Vec<PointCloud> = (0..3)
            .map(|_| PointCloud::from_flat(&rng::normals(&mut r, 30)).unwrap())
            .collect();
        let (once, _) = normalize(&clouds).unwrap();
        let (twice, stats) = normalize(&once).unwrap();
        assert!(stats.mean.iter().all(|m| m.abs() < 1e-12));
        assert!((stats.scale - 1.0).abs() < 1e-12);
        for (a, b) in once.iter().zip(&twice) {
            for (p, q) in a.points().iter().zip(b.points()) {
                assert!(dist(p, q) < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_shares_one_map() {
        // Points (0,0,0),(2,0,0) and (10,0,0),(12,0,0): mean (6,0,0).
        // Centered x: -6,-4,4,6; y,z all 0. Pooled variance = (36+16+16+36)/12.
        let a = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let b = cloud(&[[10.0, 0.0, 0.0], [12.0, 0.0, 0.0]]);
        let (out, stats) = normalize(&[a, b]).unwrap();
        let std = (104.0f64 / 12.0).sqrt();
        assert_eq!(stats.mean, [6.0, 0.0, 0.0]);
        assert!((stats.scale - std).abs() < 1e-12);
        assert!((out[0].points()[0][0] - (-6.0 / std)).abs() < 1e-12);
        assert!((out[1].points()[1][0] - (6.0 / std)).abs() < 1e-12);
        let back = stats.invert(&out[1].points()[0]);
        assert!((back[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn fps_picks_farthest() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 1]);
        assert_eq!(
            farthest_point_sample(&c, 4, 0),
            Err(GeometryError::SampleTooLarge { k: 4, n: 3 })
        );
        let mut all = farthest_point_sample(&c, 3, 5).unwrap();
        assert_eq!(all[0], 2);
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn fps_cube_corners_within_greedy_bound() {
        let corners: Vec<Point> = (0..8)
            .map(|c| [(c >> 2 & 1) as f64, (c >> 1 & 1) as f64, (c & 1) as f64])
            .collect();
        let c = cloud(&corners);
        let chosen = farthest_point_sample(&c, 4, 0).unwrap();
        // (1,1,1) first, then every remaining corner ties at distance 1.
        assert_eq!(chosen, vec![0, 7, 1, 2]);
        let min_pair = |idx: &[usize]| {
            let mut m = f64::INFINITY;
            for i in 0..idx.len() {
                for j in i + 1..idx.len() {
                    m = m.min(dist(&corners[idx[i]], &corners[idx[j]]));
                }
            }
            m
        };
        let mut best = 0.0f64;
        for mask in 0u32..256 {
            if mask.count_ones() == 4 {
                let idx: Vec<usize> = (0..8).filter(|i| mask >> i & 1 == 1).collect();
                best = best.max(min_pair(&idx));
            }
        }
        assert!((best - 2f64.sqrt()).abs() < 1e-12);
        // Greedy max-min is a 2-approximation of the best 4-subset.
        assert!(min_pair(&chosen) >= best / 2.0);
    }

    #[test]
    fn voxelize_node_and_center() {
        let g = voxelize(&cloud(&[[-1.0, -1.0, -1.0]]), 16).unwrap();
        assert_eq!(g.occupancy()[0], 1.0);
        assert_eq!(g.occupancy().iter().sum::<f64>(), 1.0);
        assert_eq!(&g.coords()[0..3], &[-1.0, -1.0, -1.0]);

        let h = 2.0 / 15.0;
        let center = [-1.0 + 0.5 * h, -1.0 + 0.5 * h, -1.0 + 0.5 * h];
        let g = voxelize(&cloud(&[center]), 16).unwrap();
        let hits: Vec<f64> = g.occupancy().iter().copied().filter(|&w| w > 0.0).collect();
        assert_eq!(hits.len(), 8);
        assert!(hits.iter().all(|&w| (w - 0.125).abs() < 1e-12));

        assert_eq!(voxelize(&cloud(&[center]), 20).unwrap_err(), GeometryError::Resolution(20));
    }

    #[test]
    fn coincident_points_double_occupancy() {
        let p = [0.3, -0.2, 0.7];
        let one = voxelize(&cloud(&[p]), 16).unwrap();
        let two = voxelize(&cloud(&[p, p]), 16).unwrap();
        for (a, b) in one.occupancy().iter().zip(two.occupancy()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in one.coords().iter().zip(two.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn devoxelize_reads_nodes_and_constants() {
        let v = 16;
        let coords: Vec<f64> = (0..v * v * v * 3).map(|i| (i as f64).sin()).collect();
        let g = VoxelGrid::from_coords(v, 1.0, coords).unwrap();
        let node = g.node_position(3, 7, 11);
        let idx = g.node_index(3, 7, 11);
        let got = devoxelize(&g, &cloud(&[node]));
        for a in 0..3 {
            assert!((got[0][a] - g.coords()[idx * 3 + a]).abs() < 1e-12);
        }
        let constant = VoxelGrid::from_coords(v, 1.0, [0.5, -2.0, 3.0].repeat(v * v * v)).unwrap();
        for q in devoxelize(&constant, &cloud(&[[0.13, -0.77, 0.91], [5.0, 5.0, -5.0]])) {
            assert!((q[0] - 0.5).abs() < 1e-12 && (q[1] + 2.0).abs() < 1e-12 && (q[2] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn voxel_round_trip_error_is_within_cell_size() {
        let mut r = rng::stream(3, "roundtrip");
        let pts: Vec<Point> = (0..16)
            .map(|_| [0.0; 3].map(|_: f64| rng::uniform(&mut r) * 1.8 - 0.9))
            .collect();
        let c = cloud(&pts);
        let back = devoxelize(&voxelize(&c, 32).unwrap(), &c);
        let mae: f64 = back
            .iter()
            .zip(c.points())
            .map(|(a, b)| (0..3).map(|i| (a[i] - b[i]).abs()).sum::<f64>() / 3.0)
            .sum::<f64>()
            / 16.0;
        assert!(mae < 2.0 * (2.0 / 32.0), "mae {mae}");
    }

    #[test]
    fn token_counts() {
        assert_eq!(token_count(32, 4).unwrap(), 512);
        assert_eq!(token_count(16, 8).unwrap(), 8);
        assert_eq!(token_count(32, 5), Err(GeometryError::PatchSize { v: 32, p: 5 }));
    }

    proptest! {
        #[test]
        fn patchify_round_trips(seed in 0u64..1000, p_idx in 0usize..3) {
            let p = [2, 4, 8][p_idx];
            let v = 16;
            let mut r = rng::stream(seed, "grid");
            let g = VoxelGrid::from_coords(v, 1.0, rng::normals(&mut r, v * v * v * 3)).unwrap();
            let t = patchify(&g, p).unwrap();
            prop_assert_eq!(t.count, (v / p).pow(3));
            prop_assert_eq!(t.values.len(), t.count * t.width());
            let back = unpatchify(&t, v, 1.0).unwrap();
            prop_assert_eq!(back.coords(), g.coords());
            prop_assert_eq!(patchify(&back, p).unwrap(), t);
        }

        #[test]
        fn splat_conserves_mass(seed in 0u64..1000, n in 1usize..40) {
            let mut r = rng::stream(seed, "mass");
            let pts: Vec<Point> = (0..n).map(|_| [0.0; 3].map(|_: f64| rng::uniform(&mut r) * 2.0 - 1.0)).collect();
            let g = voxelize(&cloud(&pts), 16).unwrap();
            prop_assert!((g.occupancy().iter().sum::<f64>() - n as f64).abs() < 1e-9);
            for (node, &o) in g.occupancy().iter().enumerate() {
                prop_assert!(o >= 0.0);
                if o == 0.0 {
                    prop_assert!(g.coords()[node * 3..node * 3 + 3].iter().all(|&c| c == 0.0));
                }
            }
        }

        #[test]
        fn devoxelize_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let v = 16;
            let mut r = rng::stream(seed, "lin");
            let g1 = rng::normals(&mut r, v * v * v * 3);
            let g2 = rng::normals(&mut r, v * v * v * 3);
            let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
            let q: Vec<Point> = (0..10).map(|_| [0.0; 3].map(|_: f64| rng::uniform(&mut r) * 2.4 - 1.2)).collect();
            let q = cloud(&q);
            let d1 = devoxelize(&VoxelGrid::from_coords(v, 1.0, g1).unwrap(), &q);
            let d2 = devoxelize(&VoxelGrid::from_coords(v, 1.0, g2).unwrap(), &q);
            let dm = devoxelize(&VoxelGrid::from_coords(v, 1.0, mix).unwrap(), &q);
            for i in 0..10 {
                for c in 0..3 {
                    prop_assert!((dm[i][c] - (a * d1[i][c] + b * d2[i][c])).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn fps_ignores_trailing_duplicates(seed in 0u64..1000, k in 1usize..8) {
            let mut r = rng::stream(seed, "fps");
            let pts: Vec<Point> = (0..12).map(|_| [0.0; 3].map(|_: f64| rng::normal(&mut r))).collect();
            let base = farthest_point_sample(&cloud(&pts), k, 0).unwrap();
            let mut extended = pts.clone();
            extended.extend_from_slice(&pts[..5]);
            prop_assert_eq!(farthest_point_sample(&cloud(&extended), k, 0).unwrap(), base);
        }
    }
}
