//! Persistence images.
//!
//! A diagram is mapped to (birth, persistence) coordinates, each point becomes
//! an isotropic Gaussian of width `sigma` weighted by `persistence / b_max`,
//! and every pixel receives the exact integral of that surface over its
//! rectangle. The Gaussian is separable, so a pixel integral is a product of
//! two differences of the normal CDF and no quadrature error is introduced.

use crate::homology::PersistenceDiagram;

/// Default pixels per side.
pub const DEFAULT_RESOLUTION: usize = 16;
/// Default Gaussian width for unit-normalized clouds.
pub const DEFAULT_SIGMA: f64 = 0.05;

/// How the Gaussian width is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaPolicy {
    Fixed(f64),
    /// `sigma = 1`, the common textbook choice. Much wider than the
    /// persistence range of normalized shapes.
    Unit,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        SigmaPolicy::Fixed(DEFAULT_SIGMA)
    }
}

impl SigmaPolicy {
    pub fn sigma(&self) -> f64 {
        match *self {
            SigmaPolicy::Fixed(s) => s,
            SigmaPolicy::Unit => 1.0,
        }
    }
}

/// Pixel lattice and weighting parameters shared by every image of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub n: usize,
    pub birth_range: (f64, f64),
    pub pers_range: (f64, f64),
    pub sigma: f64,
    pub b_max: f64,
    /// Set when the spec fell back to defaults because every diagram was empty.
    pub defaulted: bool,
}

impl GridSpec {
    pub fn new(n: usize, birth_range: (f64, f64), pers_range: (f64, f64), sigma: f64, b_max: f64) -> Self {
        let spec = Self { n, birth_range, pers_range, sigma, b_max, defaulted: false };
        assert!(spec.is_valid(), "invalid grid spec {spec:?}");
        spec
    }

    /// Unit square, default width and `b_max = 1`.
    pub fn unit(n: usize, sigma: f64) -> Self {
        Self { defaulted: true, ..Self::new(n, (0.0, 1.0), (0.0, 1.0), sigma, 1.0) }
    }

    pub fn is_valid(&self) -> bool {
        self.n >= 1
            && self.birth_range.0 < self.birth_range.1
            && self.pers_range.0 < self.pers_range.1
            && self.sigma > 0.0
            && self.b_max > 0.0
            && [self.birth_range.0, self.birth_range.1, self.pers_range.0, self.pers_range.1, self.sigma, self.b_max]
                .iter()
                .all(|v| v.is_finite())
    }

    /// Same ranges at a different resolution.
    pub fn with_resolution(&self, n: usize) -> Self {
        Self { n, ..*self }
    }
}

/// `n x n` raster. `pixels[iy * n + ix]`: `ix` walks the birth axis,
/// `iy` the persistence axis, both ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceImage {
    pub n: usize,
    pub dim_tag: u8,
    pub pixels: Vec<f64>,
}

impl PersistenceImage {
    pub fn zeros(n: usize, dim_tag: u8) -> Self {
        Self { n, dim_tag, pixels: vec![0.0; n * n] }
    }

    pub fn total(&self) -> f64 {
        self.pixels.iter().sum()
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.pixels[iy * self.n + ix]
    }

    /// Sums `factor x factor` blocks into a coarser image.
    pub fn block_sum(&self, factor: usize) -> PersistenceImage {
        assert!(factor >= 1 && self.n % factor == 0);
        let m = self.n / factor;
        let mut out = PersistenceImage::zeros(m, self.dim_tag);
        for iy in 0..self.n {
            for ix in 0..self.n {
                out.pixels[(iy / factor) * m + ix / factor] += self.at(ix, iy);
            }
        }
        out
    }
}

/// `(x, y) -> (x, y - x)` over the finite pairs.
pub fn transform_diagram(pd: &PersistenceDiagram) -> Vec<(f64, f64)> {
    pd.pairs.iter().map(|&(b, d)| (b, d - b)).collect()
}

/// Linear ramp `persistence / b_max`; zero on the diagonal.
pub fn weight(u: (f64, f64), b_max: f64) -> f64 {
    u.1 / b_max
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Gaussian mass of each of `n` equal bins on `[lo, hi]` for a unit-weight
/// Gaussian centered at `mu`.
fn axis_masses(lo: f64, hi: f64, n: usize, mu: f64, sigma: f64) -> Vec<f64> {
    let edges: Vec<f64> = (0..=n)
        .map(|i| normal_cdf((lo + (hi - lo) * i as f64 / n as f64 - mu) / sigma))
        .collect();
    edges.windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn rasterize(pd: &PersistenceDiagram, spec: &GridSpec) -> PersistenceImage {
    let n = spec.n;
    let mut img = PersistenceImage::zeros(n, pd.dimension as u8);
    for u in transform_diagram(pd) {
        let w = weight(u, spec.b_max);
        if w == 0.0 {
            continue;
        }
        let mx = axis_masses(spec.birth_range.0, spec.birth_range.1, n, u.0, spec.sigma);
        let my = axis_masses(spec.pers_range.0, spec.pers_range.1, n, u.1, spec.sigma);
        for (iy, &py) in my.iter().enumerate() {
            let row = &mut img.pixels[iy * n..(iy + 1) * n];
            for (px, &mass) in row.iter_mut().zip(&mx) {
                *px += w * mass * py;
            }
        }
    }
    img
}

/// Dataset-wide grid: `b_max` is the largest persistence over all diagrams
/// and each range is the data span padded by `3 sigma`. All-empty input
/// yields the unit spec with `defaulted` set.
pub fn dataset_spec(diagrams: &[PersistenceDiagram], n: usize, policy: SigmaPolicy) -> GridSpec {
    let sigma = policy.sigma();
    let points: Vec<(f64, f64)> = diagrams.iter().flat_map(transform_diagram).collect();
    let b_max = points.iter().map(|u| u.1).fold(0.0f64, f64::max);
    if points.is_empty() || b_max <= 0.0 {
        return GridSpec::unit(n, sigma);
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo - 3.0 * sigma, hi + 3.0 * sigma)
    };
    GridSpec::new(n, span(|u| u.0), span(|u| u.1), sigma, b_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn diagram(pairs: &[(f64, f64)]) -> PersistenceDiagram {
        PersistenceDiagram { dimension: 1, pairs: pairs.to_vec(), essential: vec![] }
    }

    fn random_diagram(r: &mut rng::Rng, k: usize) -> PersistenceDiagram {
        diagram(
            &(0..k)
                .map(|_| {
                    let b = rng::uniform(r) * 0.5;
                    (b, b + 0.01 + rng::uniform(r) * 0.4)
                })
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn transform_examples() {
        assert_eq!(transform_diagram(&diagram(&[(0.0, 1.0)])), vec![(0.0, 1.0)]);
        let s = 2f64.sqrt();
        assert_eq!(transform_diagram(&diagram(&[(1.0, s)])), vec![(1.0, s - 1.0)]);
        assert!(transform_diagram(&diagram(&[])).is_empty());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(weight((0.3, 0.7), 0.7), 1.0);
        assert_eq!(weight((0.3, 0.0), 0.7), 0.0);
        assert_eq!(weight((0.0, 0.25), 0.5), 0.5);
    }

    #[test]
    fn cdf_sanity() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(3.0) - normal_cdf(-3.0) - 0.997_300_203_936_740).abs() < 1e-12);
    }

    #[test]
    fn empty_diagram_is_zero_image() {
        let img = rasterize(&diagram(&[]), &GridSpec::unit(8, 0.05));
        assert!(img.pixels.iter().all(|&p| p == 0.0));
        assert_eq!(img.pixels.len(), 64);
    }

    #[test]
    fn three_sigma_window_mass() {
        // Mass inside +-3 sigma per axis is erf(3/sqrt 2)^2 ~ 0.99461.
        let sigma = 0.05;
        let spec = GridSpec::new(
            11,
            (-3.0 * sigma, 3.0 * sigma),
            (1.0 - 3.0 * sigma, 1.0 + 3.0 * sigma),
            sigma,
            1.0,
        );
        let total = rasterize(&diagram(&[(0.0, 1.0)]), &spec).total();
        let expected = 0.997_300_203_936_740f64.powi(2);
        assert!((total - expected).abs() < 1e-12, "{total}");
        assert!((1.0 - total) < 0.006);
    }

    #[test]
    fn dataset_spec_examples() {
        let s = dataset_spec(&[diagram(&[(0.0, 0.3)]), diagram(&[(0.1, 0.8)])], 16, SigmaPolicy::default());
        assert!((s.b_max - 0.7).abs() < 1e-15);
        assert!(!s.defaulted);

        let s = dataset_spec(&[diagram(&[(0.0, 1.0)])], 16, SigmaPolicy::Fixed(0.05));
        assert!((s.birth_range.0 + 0.15).abs() < 1e-15 && (s.birth_range.1 - 0.15).abs() < 1e-15);

        let s = dataset_spec(&[diagram(&[]), diagram(&[])], 16, SigmaPolicy::default());
        assert!(s.defaulted);
        assert_eq!(s.b_max, 1.0);
        assert_eq!(SigmaPolicy::Unit.sigma(), 1.0);
    }

    #[test]
    fn total_mass_with_padded_spec() {
        let mut r = rng::stream(5, "mass");
        for _ in 0..20 {
            let pd = random_diagram(&mut r, 12);
            let spec = dataset_spec(std::slice::from_ref(&pd), 16, SigmaPolicy::default());
            let expected: f64 = transform_diagram(&pd).iter().map(|&u| weight(u, spec.b_max)).sum();
            let total = rasterize(&pd, &spec).total();
            assert!((total - expected).abs() <= 0.006 * expected);
            assert!(total <= expected);
        }
    }

    #[test]
    fn stability_constant_is_finite() {
        let mut r = rng::stream(9, "stability");
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let pd = random_diagram(&mut r, 6);
            let spec = dataset_spec(std::slice::from_ref(&pd), 16, SigmaPolicy::default());
            let delta = 1e-3;
            let moved = diagram(
                &pd.pairs
                    .iter()
                    .map(|&(b, d)| (b + delta * (2.0 * rng::uniform(&mut r) - 1.0), d + delta * (2.0 * rng::uniform(&mut r) - 1.0)))
                    .collect::<Vec<_>>(),
            );
            let a = rasterize(&pd, &spec);
            let b = rasterize(&moved, &spec);
            let l1: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum();
            worst = worst.max(l1 / delta);
        }
        assert!(worst.is_finite() && worst > 0.0);
    }

    proptest! {
        #[test]
        fn union_is_additive(seed in 0u64..10_000) {
            let mut r = rng::stream(seed, "union");
            let a = random_diagram(&mut r, 4);
            let b = random_diagram(&mut r, 3);
            let both = diagram(&[a.pairs.clone(), b.pairs.clone()].concat());
            let spec = dataset_spec(std::slice::from_ref(&both), 12, SigmaPolicy::default());
            let (ia, ib, iab) = (rasterize(&a, &spec), rasterize(&b, &spec), rasterize(&both, &spec));
            for k in 0..iab.pixels.len() {
                prop_assert!((iab.pixels[k] - ia.pixels[k] - ib.pixels[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn refinement_reproduces_coarse_image(seed in 0u64..10_000, n in 1usize..20) {
            let mut r = rng::stream(seed, "refine");
            let pd = random_diagram(&mut r, 5);
            let spec = dataset_spec(std::slice::from_ref(&pd), n, SigmaPolicy::default());
            let coarse = rasterize(&pd, &spec);
            let fine = rasterize(&pd, &spec.with_resolution(2 * n)).block_sum(2);
            for (c, f) in coarse.pixels.iter().zip(&fine.pixels) {
                prop_assert!((c - f).abs() < 1e-12);
            }
        }

        #[test]
        fn adding_a_pair_never_decreases_pixels(seed in 0u64..10_000) {
            let mut r = rng::stream(seed, "mono");
            let pd = random_diagram(&mut r, 4);
            let extra = random_diagram(&mut r, 1);
            let spec = dataset_spec(&[pd.clone(), extra.clone()], 10, SigmaPolicy::default());
            let grown = diagram(&[pd.pairs.clone(), extra.pairs].concat());
            let (a, b) = (rasterize(&pd, &spec), rasterize(&grown, &spec));
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                prop_assert!(y >= x && *x >= 0.0);
            }
        }
    }
}
