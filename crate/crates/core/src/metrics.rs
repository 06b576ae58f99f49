//! Set-level generation metrics over point clouds: Chamfer and earth mover's
//! distances, leave-one-out 1-NN accuracy and coverage.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{dist, dist2, PointCloud};

/// Largest cloud size accepted by [`emd`].
pub const EMD_MAX_POINTS: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("EMD needs equal sizes, got {0} and {1}")]
    SizeMismatch(usize, usize),
    #[error("EMD limited to {EMD_MAX_POINTS} points, got {0}")]
    TooLarge(usize),
    #[error("1-NNA needs at least two clouds in the pool")]
    SingletonPool,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mean squared nearest-neighbour distance from X to Y plus from Y to X.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricsError::Empty);
    }
    let one_way = |a: &PointCloud, b: &PointCloud| {
        a.points()
            .iter()
            .map(|p| b.points().iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(one_way(x, y) + one_way(y, x))
}

/// Minimum-cost perfect matching for a square cost matrix (row-major `n x n`).
/// Returns `assignment[row] = column`. Shortest augmenting paths with
/// potentials, `O(n^3)`.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Mean Euclidean distance under the optimal one-to-one matching.
pub fn emd(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricsError::Empty);
    }
    if x.len() != y.len() {
        return Err(MetricsError::SizeMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n > EMD_MAX_POINTS {
        return Err(MetricsError::TooLarge(n));
    }
    let cost: Vec<f64> = x.points().iter().flat_map(|p| y.points().iter().map(move |q| dist(p, q))).collect();
    let a = assignment(&cost, n);
    Ok(a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    Chamfer,
    Emd,
}

impl Distance {
    pub fn eval(self, x: &PointCloud, y: &PointCloud) -> Result<f64> {
        match self {
            Distance::Chamfer => chamfer(x, y),
            Distance::Emd => emd(x, y),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Chamfer => "CD",
            Distance::Emd => "EMD",
        })
    }
}

/// Row-major `|a| x |b|` distance matrix, computed in parallel.
pub fn cross_distances(a: &[PointCloud], b: &[PointCloud], d: Distance) -> Result<Vec<f64>> {
    let pairs: Vec<(usize, usize)> = (0..a.len()).flat_map(|i| (0..b.len()).map(move |j| (i, j))).collect();
    pairs.par_iter().map(|&(i, j)| d.eval(&a[i], &b[j])).collect()
}

fn argmin(values: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    // strict `<` keeps the first index on ties
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Leave-one-out 1-NN accuracy (percent) on the pooled set, generated
/// clouds first. Ties go to the lowest pooled index.
pub fn one_nna(gen: &[PointCloud], reference: &[PointCloud], d: Distance) -> Result<f64> {
    if gen.is_empty() || reference.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pool: Vec<PointCloud> = gen.iter().chain(reference).cloned().collect();
    let m = pool.len();
    let dm = cross_distances(&pool, &pool, d)?;
    one_nna_from_matrix(&dm, gen.len(), m)
}

/// [`one_nna`] on a precomputed pooled `m x m` matrix whose first `g` rows
/// are generated clouds.
pub fn one_nna_from_matrix(dm: &[f64], g: usize, m: usize) -> Result<f64> {
    if m < 2 {
        return Err(MetricsError::SingletonPool);
    }
    let correct = (0..m)
        .filter(|&i| {
            let nn = argmin((0..m).filter(|&j| j != i).map(|j| (j, dm[i * m + j]))).expect("pool has two clouds");
            (i < g) == (nn < g)
        })
        .count();
    Ok(100.0 * correct as f64 / m as f64)
}

/// Percent of reference clouds that are the nearest reference of at least
/// one generated cloud.
pub fn coverage(gen: &[PointCloud], reference: &[PointCloud], d: Distance) -> Result<f64> {
    if gen.is_empty() || reference.is_empty() {
        return Err(MetricsError::Empty);
    }
    let dm = cross_distances(gen, reference, d)?;
    Ok(coverage_from_matrix(&dm, gen.len(), reference.len()))
}

/// [`coverage`] on a precomputed `g x r` generated-to-reference matrix.
pub fn coverage_from_matrix(dm: &[f64], g: usize, r: usize) -> f64 {
    let mut hit = vec![false; r];
    for i in 0..g {
        if let Some(j) = argmin((0..r).map(|j| (j, dm[i * r + j]))) {
            hit[j] = true;
        }
    }
    100.0 * hit.iter().filter(|&&h| h).count() as f64 / r as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::rng;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn random_cloud(n: usize, r: &mut rng::Rng) -> PointCloud {
        PointCloud::from_flat(&rng::normals(r, 3 * n)).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_emd(x: &PointCloud, y: &PointCloud) -> f64 {
        let n = x.len();
        permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| dist(&x.points()[i], &y.points()[j])).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn chamfer_examples() {
        let mut r = rng::stream(0, "cd");
        let x = random_cloud(20, &mut r);
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0, 3.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 18.0);
        let y = random_cloud(13, &mut r);
        let mut brute = 0.0;
        for p in x.points() {
            let mut best = f64::INFINITY;
            for q in y.points() {
                best = best.min((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2));
            }
            brute += best / 20.0;
        }
        for q in y.points() {
            let mut best = f64::INFINITY;
            for p in x.points() {
                best = best.min((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2));
            }
            brute += best / 13.0;
        }
        assert!((chamfer(&x, &y).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn emd_examples() {
        let mut r = rng::stream(1, "emd");
        let x = random_cloud(30, &mut r);
        assert_eq!(emd(&x, &x).unwrap(), 0.0);
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(emd(&a, &b).unwrap(), 0.0);
        for _ in 0..20 {
            let x = random_cloud(6, &mut r);
            let y = random_cloud(6, &mut r);
            assert!((emd(&x, &y).unwrap() - brute_emd(&x, &y)).abs() < 1e-12);
        }
        assert_eq!(emd(&a, &cloud(&[[0.0; 3]])).unwrap_err(), MetricsError::SizeMismatch(2, 1));
        let big = PointCloud::new(vec![[0.0; 3]; EMD_MAX_POINTS + 1]).unwrap();
        assert_eq!(emd(&big, &big).unwrap_err(), MetricsError::TooLarge(EMD_MAX_POINTS + 1));
    }

    #[test]
    fn one_nna_examples() {
        let mut r = rng::stream(2, "nna");
        let refs: Vec<PointCloud> = (0..4).map(|_| random_cloud(8, &mut r)).collect();
        let shifted: Vec<PointCloud> = refs.iter().map(|c| cloud(&c.points().iter().map(|p| [p[0] + 1000.0, p[1], p[2]]).collect::<Vec<_>>())).collect();
        assert_eq!(one_nna(&shifted, &refs, Distance::Chamfer).unwrap(), 100.0);

        // Gen clouds at x = 0 and 10, references at x = 1 and 11: every
        // nearest neighbour belongs to the other set.
        let at = |x: f64| cloud(&[[x, 0.0, 0.0]]);
        let gen = [at(0.0), at(10.0)];
        let refs = [at(1.0), at(11.0)];
        assert_eq!(one_nna(&gen, &refs, Distance::Chamfer).unwrap(), 0.0);
        assert_eq!(one_nna(&gen, &refs, Distance::Emd).unwrap(), 0.0);

        let same: Vec<PointCloud> = (0..3).map(|_| random_cloud(5, &mut r)).collect();
        let a = one_nna(&same, &same, Distance::Chamfer).unwrap();
        assert_eq!(a, one_nna(&same, &same, Distance::Chamfer).unwrap());
        assert!((0.0..=100.0).contains(&a));
        assert_eq!(one_nna_from_matrix(&[0.0], 1, 1).unwrap_err(), MetricsError::SingletonPool);
    }

    #[test]
    fn coverage_examples() {
        let mut r = rng::stream(3, "cov");
        let refs: Vec<PointCloud> = (0..5).map(|_| random_cloud(6, &mut r)).collect();
        assert_eq!(coverage(&refs, &refs, Distance::Chamfer).unwrap(), 100.0);
        let near_first: Vec<PointCloud> = (0..3).map(|_| refs[0].clone()).collect();
        assert_eq!(coverage(&near_first, &refs, Distance::Emd).unwrap(), 20.0);
    }

    #[test]
    fn metrics_match_brute_force_on_small_sets() {
        let mut r = rng::stream(4, "brute");
        for _ in 0..5 {
            let gen: Vec<PointCloud> = (0..4).map(|_| random_cloud(5, &mut r)).collect();
            let refs: Vec<PointCloud> = (0..5).map(|_| random_cloud(5, &mut r)).collect();
            for d in [Distance::Chamfer, Distance::Emd] {
                let dist_of = |a: &PointCloud, b: &PointCloud| match d {
                    Distance::Chamfer => chamfer(a, b).unwrap(),
                    Distance::Emd => brute_emd(a, b),
                };
                let mut hits = std::collections::BTreeSet::new();
                for g in &gen {
                    let ds: Vec<f64> = refs.iter().map(|x| dist_of(g, x)).collect();
                    let best = (0..ds.len()).min_by(|&a, &b| ds[a].total_cmp(&ds[b]).then(a.cmp(&b))).unwrap();
                    hits.insert(best);
                }
                let cov = 100.0 * hits.len() as f64 / refs.len() as f64;
                assert_eq!(coverage(&gen, &refs, d).unwrap(), cov);

                let pool: Vec<&PointCloud> = gen.iter().chain(&refs).collect();
                let mut correct = 0;
                for i in 0..pool.len() {
                    let mut best = (usize::MAX, f64::INFINITY);
                    for j in 0..pool.len() {
                        if i != j {
                            let v = dist_of(pool[i], pool[j]);
                            if v < best.1 {
                                best = (j, v);
                            }
                        }
                    }
                    if (i < gen.len()) == (best.0 < gen.len()) {
                        correct += 1;
                    }
                }
                assert_eq!(one_nna(&gen, &refs, d).unwrap(), 100.0 * correct as f64 / pool.len() as f64);
            }
        }
    }

    #[test]
    fn metrics_are_rigid_invariant() {
        let mut r = rng::stream(5, "rigid");
        let gen: Vec<PointCloud> = (0..3).map(|_| random_cloud(7, &mut r)).collect();
        let refs: Vec<PointCloud> = (0..3).map(|_| random_cloud(7, &mut r)).collect();
        let (c, s) = (0.6f64, 0.8f64);
        let move_it = |pc: &PointCloud| cloud(&pc.points().iter().map(|p| [c * p[0] - s * p[1] + 2.0, s * p[0] + c * p[1] - 1.0, p[2] + 0.5]).collect::<Vec<_>>());
        let gen2: Vec<PointCloud> = gen.iter().map(move_it).collect();
        let refs2: Vec<PointCloud> = refs.iter().map(move_it).collect();
        for d in [Distance::Chamfer, Distance::Emd] {
            let a = cross_distances(&gen, &refs, d).unwrap();
            let b = cross_distances(&gen2, &refs2, d).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
            assert_eq!(one_nna(&gen, &refs, d).unwrap(), one_nna(&gen2, &refs2, d).unwrap());
            assert_eq!(coverage(&gen, &refs, d).unwrap(), coverage(&gen2, &refs2, d).unwrap());
        }
    }

    #[test]
    fn emd_bounds() {
        let mut r = rng::stream(6, "bounds");
        for _ in 0..10 {
            let x = random_cloud(9, &mut r);
            let y = random_cloud(9, &mut r);
            let e = emd(&x, &y).unwrap();
            let identity: f64 = x.points().iter().zip(y.points()).map(|(p, q)| dist(p, q)).sum::<f64>() / 9.0;
            let min_pair = x.points().iter().flat_map(|p| y.points().iter().map(move |q| dist(p, q))).fold(f64::INFINITY, f64::min);
            assert!(e <= identity + 1e-12);
            assert!(e >= min_pair - 1e-12);
        }
    }
}
