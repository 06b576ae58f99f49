//! Vietoris–Rips filtrations and persistent homology over Z/2.
//!
//! An edge enters at the Euclidean distance between its endpoints and every
//! higher simplex at the length of its longest edge. Persistence pairs come
//! from the standard left-to-right column reduction of the boundary matrix.

use std::collections::HashMap;

use thiserror::Error;

use crate::geometry::{dist, PointCloud};

/// Highest simplex dimension the builder will enumerate.
pub const MAX_SIMPLEX_DIM: usize = 3;

/// Default cap on the number of simplices in one filtration.
pub const DEFAULT_SIMPLEX_CAP: usize = 5_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomologyError {
    #[error("filtration would exceed {cap} simplices")]
    TooManySimplices { cap: usize },
    #[error("max_dim {0} outside 0..={MAX_SIMPLEX_DIM}")]
    Dimension(usize),
    #[error("r_max must be positive and finite, got {0}")]
    Radius(f64),
    #[error("simplex {index} is not closed under faces or out of order")]
    NotAFiltration { index: usize },
}

/// Vertex tuple (strictly increasing, 1 to 4 entries) with its filtration value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Simplex {
    verts: [u32; 4],
    len: u8,
    pub value: f64,
}

impl Simplex {
    pub fn new(vertices: &[u32], value: f64) -> Self {
        assert!((1..=4).contains(&vertices.len()), "simplex needs 1 to 4 vertices");
        assert!(vertices.windows(2).all(|w| w[0] < w[1]), "vertices must be strictly increasing");
        let mut verts = [0u32; 4];
        verts[..vertices.len()].copy_from_slice(vertices);
        Self { verts, len: vertices.len() as u8, value }
    }

    pub fn vertices(&self) -> &[u32] {
        &self.verts[..self.len as usize]
    }

    pub fn dim(&self) -> usize {
        self.len as usize - 1
    }

    fn key(&self) -> u64 {
        key_of(self.vertices())
    }

    /// Codimension-1 faces, each given by its vertex list.
    pub fn facets(&self) -> impl Iterator<Item = ([u32; 4], usize)> + '_ {
        let n = self.len as usize;
        (0..if n > 1 { n } else { 0 }).map(move |skip| {
            let mut f = [0u32; 4];
            let mut m = 0;
            for (i, &v) in self.vertices().iter().enumerate() {
                if i != skip {
                    f[m] = v;
                    m += 1;
                }
            }
            (f, m)
        })
    }
}

fn key_of(vertices: &[u32]) -> u64 {
    vertices.iter().fold(0u64, |acc, &v| (acc << 16) | (u64::from(v) + 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filtration {
    simplices: Vec<Simplex>,
    r_max: f64,
    max_dim: usize,
}

impl Filtration {
    /// Accepts an explicit order. Each simplex's faces must appear earlier and
    /// values must be non-decreasing.
    pub fn from_simplices(simplices: Vec<Simplex>, r_max: f64) -> Result<Self, HomologyError> {
        let mut seen: HashMap<u64, f64> = HashMap::with_capacity(simplices.len());
        let mut last = f64::NEG_INFINITY;
        for (index, s) in simplices.iter().enumerate() {
            if s.value < last || seen.contains_key(&s.key()) {
                return Err(HomologyError::NotAFiltration { index });
            }
            for (f, m) in s.facets() {
                if !seen.contains_key(&key_of(&f[..m])) {
                    return Err(HomologyError::NotAFiltration { index });
                }
            }
            last = s.value;
            seen.insert(s.key(), s.value);
        }
        let max_dim = simplices.iter().map(Simplex::dim).max().unwrap_or(0);
        Ok(Self { simplices, r_max, max_dim })
    }

    pub fn simplices(&self) -> &[Simplex] {
        &self.simplices
    }

    pub fn len(&self) -> usize {
        self.simplices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.simplices.is_empty()
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn max_dim(&self) -> usize {
        self.max_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VrOptions {
    pub max_dim: usize,
    pub r_max: f64,
    pub cap: usize,
}

impl VrOptions {
    pub fn new(max_dim: usize, r_max: f64) -> Self {
        Self { max_dim, r_max, cap: DEFAULT_SIMPLEX_CAP }
    }
}

/// All simplices up to `max_dim` with every edge no longer than `r_max`,
/// sorted by (value, dimension, vertices).
pub fn build_vr_filtration(cloud: &PointCloud, max_dim: usize, r_max: f64) -> Result<Filtration, HomologyError> {
    build_vr_filtration_with(cloud, &VrOptions::new(max_dim, r_max))
}

pub fn build_vr_filtration_with(cloud: &PointCloud, opts: &VrOptions) -> Result<Filtration, HomologyError> {
    if opts.max_dim > MAX_SIMPLEX_DIM {
        return Err(HomologyError::Dimension(opts.max_dim));
    }
    if !(opts.r_max > 0.0 && opts.r_max.is_finite()) {
        return Err(HomologyError::Radius(opts.r_max));
    }
    let pts = cloud.points();
    let n = pts.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(&pts[i], &pts[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let within = |i: usize, j: usize| d[i * n + j] <= opts.r_max;

    let mut out: Vec<Simplex> = Vec::new();
    let push = |s: Simplex, out: &mut Vec<Simplex>| -> Result<(), HomologyError> {
        if out.len() >= opts.cap {
            return Err(HomologyError::TooManySimplices { cap: opts.cap });
        }
        out.push(s);
        Ok(())
    };
    // Upper neighbor lists keep the clique enumeration output-sensitive.
    let upper: Vec<Vec<u32>> = (0..n)
        .map(|i| (i + 1..n).filter(|&j| within(i, j)).map(|j| j as u32).collect())
        .collect();
    for i in 0..n {
        push(Simplex::new(&[i as u32], 0.0), &mut out)?;
        if opts.max_dim == 0 {
            continue;
        }
        for (a, &j) in upper[i].iter().enumerate() {
            let (i32_, j_) = (i as u32, j as usize);
            let dij = d[i * n + j_];
            push(Simplex::new(&[i32_, j], dij), &mut out)?;
            if opts.max_dim < 2 {
                continue;
            }
            for (b, &k) in upper[i][a + 1..].iter().enumerate() {
                let k_ = k as usize;
                if !within(j_, k_) {
                    continue;
                }
                let dijk = dij.max(d[i * n + k_]).max(d[j_ * n + k_]);
                push(Simplex::new(&[i32_, j, k], dijk), &mut out)?;
                if opts.max_dim < 3 {
                    continue;
                }
                for &l in &upper[i][a + 1 + b + 1..] {
                    let l_ = l as usize;
                    if !within(j_, l_) || !within(k_, l_) {
                        continue;
                    }
                    let v = dijk.max(d[i * n + l_]).max(d[j_ * n + l_]).max(d[k_ * n + l_]);
                    push(Simplex::new(&[i32_, j, k, l], v), &mut out)?;
                }
            }
        }
    }
    out.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.len.cmp(&b.len))
            .then_with(|| a.vertices().cmp(b.vertices()))
    });
    Ok(Filtration { simplices: out, r_max: opts.r_max, max_dim: opts.max_dim })
}

/// Sparse Z/2 boundary matrix; column `j` holds the sorted filtration
/// positions of the facets of simplex `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMatrix {
    columns: Vec<Vec<u32>>,
    dims: Vec<u8>,
}

impl BoundaryMatrix {
    pub fn columns(&self) -> &[Vec<u32>] {
        &self.columns
    }

    pub fn dims(&self) -> &[u8] {
        &self.dims
    }

    /// Boundary of an arbitrary chain, given as column indices.
    pub fn boundary_of(&self, chain: &[u32]) -> Vec<u32> {
        let mut acc: Vec<u32> = Vec::new();
        for &c in chain {
            acc = symmetric_difference(&acc, &self.columns[c as usize]);
        }
        acc
    }
}

pub fn boundary_matrix(filt: &Filtration) -> BoundaryMatrix {
    let mut index: HashMap<u64, u32> = HashMap::with_capacity(filt.len());
    let mut columns = Vec::with_capacity(filt.len());
    let mut dims = Vec::with_capacity(filt.len());
    for (pos, s) in filt.simplices.iter().enumerate() {
        let mut col: Vec<u32> = s
            .facets()
            .map(|(f, m)| {
                *index
                    .get(&key_of(&f[..m]))
                    .expect("filtration invariant violated: face missing before coface")
            })
            .collect();
        col.sort_unstable();
        columns.push(col);
        dims.push(s.dim() as u8);
        index.insert(s.key(), pos as u32);
    }
    BoundaryMatrix { columns, dims }
}

fn symmetric_difference(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReductionMode {
    /// Left-to-right over the whole matrix.
    #[default]
    Standard,
    /// Dimensions high to low, zeroing columns already known to be creators.
    Twist,
}

/// Output of the reduction: `(birth, death)` column pairs and unpaired creators.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pairing {
    pub pairs: Vec<(usize, usize)>,
    pub essential: Vec<usize>,
}

pub fn reduce(matrix: &BoundaryMatrix) -> Pairing {
    reduce_with(matrix, ReductionMode::Standard)
}

pub fn reduce_with(matrix: &BoundaryMatrix, mode: ReductionMode) -> Pairing {
    match mode {
        ReductionMode::Standard => reduce_standard(matrix),
        ReductionMode::Twist => reduce_twist(matrix),
    }
}

/// Reduces one column against the stored pivots; returns the reduced column.
fn reduce_column(mut col: Vec<u32>, pivot_owner: &[u32], reduced: &[Vec<u32>]) -> Vec<u32> {
    while let Some(&low) = col.last() {
        let owner = pivot_owner[low as usize];
        if owner == u32::MAX {
            break;
        }
        col = symmetric_difference(&col, &reduced[owner as usize]);
    }
    col
}

fn reduce_standard(matrix: &BoundaryMatrix) -> Pairing {
    let n = matrix.columns.len();
    let mut pivot_owner = vec![u32::MAX; n];
    let mut reduced: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut is_pair_member = vec![false; n];
    let mut pairs = Vec::new();

    // Once every (k-1)-simplex has been seen and every (k-1)-creator is
    // paired, no later k-column can keep a pivot, so it reduces to zero.
    let top = matrix.dims.iter().copied().max().unwrap_or(0) as usize;
    let mut remaining = vec![0usize; top + 2];
    for &d in &matrix.dims {
        remaining[d as usize] += 1;
    }
    let mut open_creators = vec![0usize; top + 2];

    for j in 0..n {
        let dim = matrix.dims[j] as usize;
        remaining[dim] -= 1;
        if dim > 0 && remaining[dim - 1] == 0 && open_creators[dim - 1] == 0 {
            open_creators[dim] += 1;
            continue;
        }
        let col = reduce_column(matrix.columns[j].clone(), &pivot_owner, &reduced);
        match col.last() {
            Some(&low) => {
                pivot_owner[low as usize] = j as u32;
                is_pair_member[low as usize] = true;
                is_pair_member[j] = true;
                open_creators[dim - 1] -= 1;
                pairs.push((low as usize, j));
                reduced[j] = col;
            }
            None => open_creators[dim] += 1,
        }
    }
    finish(pairs, is_pair_member)
}

fn reduce_twist(matrix: &BoundaryMatrix) -> Pairing {
    let n = matrix.columns.len();
    let mut pivot_owner = vec![u32::MAX; n];
    let mut reduced: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut cleared = vec![false; n];
    let mut is_pair_member = vec![false; n];
    let mut pairs = Vec::new();
    let top = matrix.dims.iter().copied().max().unwrap_or(0);
    for dim in (1..=top).rev() {
        for j in 0..n {
            if matrix.dims[j] != dim || cleared[j] {
                continue;
            }
            let col = reduce_column(matrix.columns[j].clone(), &pivot_owner, &reduced);
            if let Some(&low) = col.last() {
                pivot_owner[low as usize] = j as u32;
                cleared[low as usize] = true;
                is_pair_member[low as usize] = true;
                is_pair_member[j] = true;
                pairs.push((low as usize, j));
                reduced[j] = col;
            }
        }
    }
    pairs.sort_by_key(|&(_, d)| d);
    finish(pairs, is_pair_member)
}

fn finish(pairs: Vec<(usize, usize)>, is_pair_member: Vec<bool>) -> Pairing {
    let essential = is_pair_member
        .iter()
        .enumerate()
        .filter(|(_, &m)| !m)
        .map(|(i, _)| i)
        .collect();
    Pairing { pairs, essential }
}

/// Birth–death pairs of one homology dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PersistenceDiagram {
    pub dimension: usize,
    /// Finite pairs with `birth < death`.
    pub pairs: Vec<(f64, f64)>,
    /// Births of classes that never die.
    pub essential: Vec<f64>,
}

impl PersistenceDiagram {
    pub fn empty(dimension: usize) -> Self {
        Self { dimension, ..Default::default() }
    }

    /// Rank of homology at radius `r` read off the diagram.
    pub fn betti_at(&self, r: f64) -> usize {
        self.pairs.iter().filter(|&&(b, d)| b <= r && r < d).count()
            + self.essential.iter().filter(|&&b| b <= r).count()
    }

    pub fn persistences(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|&(b, d)| d - b)
    }

    pub fn max_persistence(&self) -> Option<f64> {
        self.persistences().reduce(f64::max)
    }
}

/// Diagrams for dimensions `0..max_dim`. Zero-persistence pairs are dropped.
pub fn persistence_diagrams(filt: &Filtration) -> Vec<PersistenceDiagram> {
    persistence_diagrams_with(filt, ReductionMode::Standard)
}

pub fn persistence_diagrams_with(filt: &Filtration, mode: ReductionMode) -> Vec<PersistenceDiagram> {
    let pairing = reduce_with(&boundary_matrix(filt), mode);
    let s = filt.simplices();
    let mut out: Vec<PersistenceDiagram> = (0..filt.max_dim).map(PersistenceDiagram::empty).collect();
    for &(b, d) in &pairing.pairs {
        let dim = s[b].dim();
        if dim < filt.max_dim && s[b].value < s[d].value {
            out[dim].pairs.push((s[b].value, s[d].value));
        }
    }
    for &e in &pairing.essential {
        let dim = s[e].dim();
        if dim < filt.max_dim {
            out[dim].essential.push(s[e].value);
        }
    }
    for pd in &mut out {
        pd.pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pd.essential.sort_by(f64::total_cmp);
    }
    out
}

/// Betti numbers `(b0, b1, b2)` of the sub-complex with values `<= r`,
/// computed by dense Gaussian elimination over Z/2. Independent of the
/// persistence reduction; meant as an oracle for small complexes.
pub fn betti_numbers(filt: &Filtration, r: f64) -> [usize; 3] {
    let sub: Vec<&Simplex> = filt.simplices.iter().filter(|s| s.value <= r).collect();
    let mut by_dim: Vec<Vec<&Simplex>> = vec![Vec::new(); MAX_SIMPLEX_DIM + 1];
    for s in &sub {
        by_dim[s.dim()].push(s);
    }
    let local: Vec<HashMap<u64, usize>> = by_dim
        .iter()
        .map(|ss| ss.iter().enumerate().map(|(i, s)| (s.key(), i)).collect())
        .collect();
    // rank of the boundary map from dimension k to k-1
    let rank = |k: usize| -> usize {
        if k == 0 || k > MAX_SIMPLEX_DIM || by_dim[k].is_empty() {
            return 0;
        }
        let rows = by_dim[k - 1].len();
        let words = rows.div_ceil(64);
        let mut m: Vec<Vec<u64>> = by_dim[k]
            .iter()
            .map(|s| {
                let mut bits = vec![0u64; words];
                for (f, len) in s.facets() {
                    let i = local[k - 1][&key_of(&f[..len])];
                    bits[i / 64] ^= 1 << (i % 64);
                }
                bits
            })
            .collect();
        gf2_rank(&mut m, rows)
    };
    let ranks: Vec<usize> = (0..=MAX_SIMPLEX_DIM + 1).map(rank).collect();
    let mut out = [0usize; 3];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = by_dim[k].len() - ranks[k] - ranks[k + 1];
    }
    out
}

fn gf2_rank(m: &mut [Vec<u64>], rows: usize) -> usize {
    let mut rank = 0;
    for bit in 0..rows {
        let (w, b) = (bit / 64, 1u64 << (bit % 64));
        let Some(p) = (rank..m.len()).find(|&i| m[i][w] & b != 0) else {
            continue;
        };
        m.swap(rank, p);
        let pivot = m[rank].clone();
        for (i, row) in m.iter_mut().enumerate() {
            if i != rank && row[w] & b != 0 {
                for (x, y) in row.iter_mut().zip(&pivot) {
                    *x ^= y;
                }
            }
        }
        rank += 1;
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::rng;
    use proptest::prelude::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn square() -> PointCloud {
        cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    }

    #[test]
    fn two_points() {
        let f = build_vr_filtration(&cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]), 1, 2.0).unwrap();
        let got: Vec<(Vec<u32>, f64)> = f.simplices().iter().map(|s| (s.vertices().to_vec(), s.value)).collect();
        assert_eq!(got, vec![(vec![0], 0.0), (vec![1], 0.0), (vec![0, 1], 1.0)]);
        let pairing = reduce(&boundary_matrix(&f));
        assert_eq!(pairing.pairs, vec![(1, 2)]);
        assert_eq!(pairing.essential, vec![0]);
        let pds = persistence_diagrams(&f);
        assert_eq!(pds[0].pairs, vec![(0.0, 1.0)]);
        assert_eq!(pds[0].essential, vec![0.0]);
    }

    #[test]
    fn single_point_diagram() {
        let f = build_vr_filtration(&cloud(&[[0.5; 3]]), 1, 1.0).unwrap();
        let pds = persistence_diagrams(&f);
        assert!(pds[0].pairs.is_empty());
        assert_eq!(pds[0].essential, vec![0.0]);
    }

    #[test]
    fn square_filtration_contents() {
        let f = build_vr_filtration(&square(), 2, 2.0).unwrap();
        let count = |dim: usize, v: f64| {
            f.simplices().iter().filter(|s| s.dim() == dim && (s.value - v).abs() < 1e-12).count()
        };
        assert_eq!(count(0, 0.0), 4);
        assert_eq!(count(1, 1.0), 4);
        assert_eq!(count(1, 2f64.sqrt()), 2);
        assert_eq!(count(2, 2f64.sqrt()), 4);
        assert_eq!(f.len(), 14);
    }

    #[test]
    fn square_has_one_loop() {
        let f = build_vr_filtration(&square(), 2, 2.0).unwrap();
        let pds = persistence_diagrams(&f);
        assert_eq!(pds[1].pairs.len(), 1);
        let (b, d) = pds[1].pairs[0];
        assert_eq!(b, 1.0);
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        let full = build_vr_filtration(&square(), 3, 2.0).unwrap();
        assert_eq!(betti_numbers(&full, 1.2), [1, 1, 0]);
        assert_eq!(betti_numbers(&full, 1.5), [1, 0, 0]);
        assert_eq!(betti_numbers(&full, 0.0), [4, 0, 0]);
        // Without tetrahedra the hollow 2-skeleton keeps a void.
        assert_eq!(betti_numbers(&f, 1.5), [1, 0, 1]);
    }

    #[test]
    fn small_radius_gives_vertices_only() {
        let f = build_vr_filtration(&square(), 3, 0.5).unwrap();
        assert!(f.simplices().iter().all(|s| s.dim() == 0));
    }

    #[test]
    fn rejects_bad_options() {
        assert_eq!(build_vr_filtration(&square(), 4, 1.0).unwrap_err(), HomologyError::Dimension(4));
        assert_eq!(build_vr_filtration(&square(), 2, 0.0).unwrap_err(), HomologyError::Radius(0.0));
        let opts = VrOptions { cap: 10, ..VrOptions::new(2, 2.0) };
        assert_eq!(
            build_vr_filtration_with(&square(), &opts).unwrap_err(),
            HomologyError::TooManySimplices { cap: 10 }
        );
    }

    #[test]
    fn boundary_columns() {
        let f = build_vr_filtration(&cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), 2, 2.0).unwrap();
        let m = boundary_matrix(&f);
        for (j, s) in f.simplices().iter().enumerate() {
            match s.dim() {
                0 => assert!(m.columns()[j].is_empty()),
                1 => {
                    let faces: Vec<u32> = m.columns()[j]
                        .iter()
                        .flat_map(|&r| f.simplices()[r as usize].vertices().to_vec())
                        .collect();
                    let mut want = s.vertices().to_vec();
                    want.sort();
                    assert_eq!(faces, want);
                }
                _ => {
                    assert_eq!(m.columns()[j].len(), 3);
                    assert!(m.boundary_of(&m.columns()[j]).is_empty());
                }
            }
        }
    }

    #[test]
    fn from_simplices_rejects_missing_faces() {
        let bad = vec![Simplex::new(&[0], 0.0), Simplex::new(&[0, 1], 1.0)];
        assert_eq!(Filtration::from_simplices(bad, 1.0).unwrap_err(), HomologyError::NotAFiltration { index: 1 });
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut r = rng::stream(seed, "homology");
        PointCloud::new((0..n).map(|_| [0.0; 3].map(|_: f64| rng::uniform(&mut r))).collect()).unwrap()
    }

    fn multiset(pds: &[PersistenceDiagram]) -> Vec<(usize, u64, u64)> {
        let mut v: Vec<(usize, u64, u64)> = pds
            .iter()
            .flat_map(|pd| pd.pairs.iter().map(move |&(b, d)| (pd.dimension, b.to_bits(), d.to_bits())))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn twist_agrees_with_standard() {
        for seed in 0..20 {
            let f = build_vr_filtration(&random_cloud(seed, 9), 3, 0.8).unwrap();
            let a = persistence_diagrams_with(&f, ReductionMode::Standard);
            let b = persistence_diagrams_with(&f, ReductionMode::Twist);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tie_order_does_not_change_diagrams() {
        // A 3x3 planar grid has many equal edge lengths.
        let pts: Vec<Point> = (0..9).map(|i| [(i % 3) as f64, (i / 3) as f64, 0.0]).collect();
        let f = build_vr_filtration(&cloud(&pts), 2, 3.0).unwrap();
        let reference = multiset(&persistence_diagrams(&f));
        let mut r = rng::stream(11, "ties");
        for _ in 0..10 {
            // Shuffle within (value, dim) groups; faces stay ahead of cofaces.
            let mut s = f.simplices().to_vec();
            let mut start = 0;
            while start < s.len() {
                let mut end = start;
                while end < s.len() && s[end].value == s[start].value && s[end].dim() == s[start].dim() {
                    end += 1;
                }
                for i in (start + 1..end).rev() {
                    let j = rng::uniform_int(&mut r, start, i);
                    s.swap(i, j);
                }
                start = end;
            }
            let shuffled = Filtration::from_simplices(s, f.r_max()).unwrap();
            assert_eq!(multiset(&persistence_diagrams(&shuffled)), reference);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn boundary_of_boundary_vanishes(seed in 0u64..10_000, n in 2usize..9) {
            let f = build_vr_filtration(&random_cloud(seed, n), 3, 2.0).unwrap();
            let m = boundary_matrix(&f);
            for col in m.columns() {
                prop_assert!(m.boundary_of(col).is_empty());
            }
        }

        #[test]
        fn pairing_counts_every_simplex(seed in 0u64..10_000, n in 1usize..9) {
            let f = build_vr_filtration(&random_cloud(seed, n), 3, 0.7).unwrap();
            let p = reduce(&boundary_matrix(&f));
            prop_assert_eq!(2 * p.pairs.len() + p.essential.len(), f.len());
        }

        #[test]
        fn diagrams_match_betti_oracle(seed in 0u64..10_000, n in 1usize..9, r_max in 0.2f64..2.0) {
            let f = build_vr_filtration(&random_cloud(seed, n), 3, r_max).unwrap();
            let pds = persistence_diagrams(&f);
            let mut r = rng::stream(seed, "radii");
            for _ in 0..8 {
                let radius = rng::uniform(&mut r) * r_max;
                let oracle = betti_numbers(&f, radius);
                for k in 0..3 {
                    prop_assert_eq!(pds[k].betti_at(radius), oracle[k]);
                }
            }
        }

        #[test]
        fn rigid_motion_preserves_diagrams(seed in 0u64..10_000, angle in 0.0f64..6.28) {
            let c = random_cloud(seed, 8);
            let (s, co) = angle.sin_cos();
            let moved = PointCloud::new(
                c.points().iter().map(|p| [co * p[0] - s * p[1] + 3.0, s * p[0] + co * p[1] - 1.0, p[2] + 0.5]).collect(),
            ).unwrap();
            let a = persistence_diagrams(&build_vr_filtration(&c, 3, 2.0).unwrap());
            let b = persistence_diagrams(&build_vr_filtration(&moved, 3, 2.0).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.pairs.len(), y.pairs.len());
                prop_assert_eq!(x.essential.len(), y.essential.len());
                for (p, q) in x.pairs.iter().zip(&y.pairs) {
                    prop_assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
                }
            }
        }
    }
}
