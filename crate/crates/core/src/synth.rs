//! Synthetic shape families used for smoke runs and tests.

use std::f64::consts::TAU;

use crate::geometry::{Point, PointCloud};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Torus,
    DoubleTorus,
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Torus => "torus",
            Shape::DoubleTorus => "double_torus",
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "torus" => Ok(Shape::Torus),
            "double_torus" => Ok(Shape::DoubleTorus),
            other => Err(format!("unknown shape `{other}` (sphere, torus, double_torus)")),
        }
    }
}

fn jitter(p: Point, noise: f64, rng: &mut Rng) -> Point {
    if noise == 0.0 {
        return p;
    }
    [p[0] + noise * rng::normal(rng), p[1] + noise * rng::normal(rng), p[2] + noise * rng::normal(rng)]
}

/// Uniform samples on a sphere of the given radius.
pub fn sphere(n: usize, radius: f64, noise: f64, rng: &mut Rng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let g = [rng::normal(rng), rng::normal(rng), rng::normal(rng)];
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
            jitter(g.map(|c| radius * c / norm), noise, rng)
        })
        .collect()
}

fn torus_point(major: f64, minor: f64, rng: &mut Rng) -> Point {
    // Area element is proportional to (R + r cos v); accept v accordingly.
    loop {
        let u = TAU * rng::uniform(rng);
        let v = TAU * rng::uniform(rng);
        if rng::uniform(rng) * (major + minor) <= major + minor * v.cos() {
            let ring = major + minor * v.cos();
            return [ring * u.cos(), ring * u.sin(), minor * v.sin()];
        }
    }
}

/// Area-uniform samples on a torus in the xy plane.
pub fn torus(n: usize, major: f64, minor: f64, noise: f64, rng: &mut Rng) -> Vec<Point> {
    (0..n).map(|_| jitter(torus_point(major, minor, rng), noise, rng)).collect()
}

fn inside_tube(p: &Point, center_x: f64, major: f64, minor: f64) -> bool {
    let x = p[0] - center_x;
    let ring = (x * x + p[1] * p[1]).sqrt() - major;
    ring * ring + p[2] * p[2] < minor * minor
}

/// Two overlapping tori side by side with the interior parts of each
/// surface removed, approximating a genus-2 surface.
pub fn double_torus(n: usize, major: f64, minor: f64, noise: f64, rng: &mut Rng) -> Vec<Point> {
    let offset = major + 0.5 * minor;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let side = if rng::uniform(rng) < 0.5 { -1.0 } else { 1.0 };
        let mut p = torus_point(major, minor, rng);
        p[0] += side * offset;
        if inside_tube(&p, -side * offset, major, minor) {
            continue;
        }
        out.push(jitter(p, noise, rng));
    }
    out
}

pub fn generate(shape: Shape, n: usize, noise: f64, rng: &mut Rng) -> Vec<Point> {
    match shape {
        Shape::Sphere => sphere(n, 1.0, noise, rng),
        Shape::Torus => torus(n, 1.0, 0.35, noise, rng),
        Shape::DoubleTorus => double_torus(n, 1.0, 0.35, noise, rng),
    }
}

/// `count` clouds cycling through `shapes`, each with `n` points and ids
/// like `torus_0003`. Deterministic per seed.
pub fn dataset(shapes: &[Shape], count: usize, n: usize, noise: f64, seed: u64) -> Vec<PointCloud> {
    (0..count)
        .map(|i| {
            let shape = shapes[i % shapes.len()];
            let mut r = rng::substream(seed, "synth", i as u64);
            PointCloud::new(generate(shape, n, noise, &mut r))
                .expect("generated points are finite")
                .with_id(format!("{}_{i:04}", shape.name()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_lie_on_their_surfaces() {
        let mut r = rng::stream(0, "t");
        for p in sphere(200, 2.0, 0.0, &mut r) {
            assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 2.0).abs() < 1e-12);
        }
        for p in torus(200, 1.0, 0.35, 0.0, &mut r) {
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0;
            assert!((ring * ring + p[2] * p[2] - 0.35f64.powi(2)).abs() < 1e-12);
        }
        assert_eq!(double_torus(100, 1.0, 0.35, 0.0, &mut r).len(), 100);
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = dataset(&[Shape::Sphere, Shape::Torus], 4, 32, 0.01, 3);
        let b = dataset(&[Shape::Sphere, Shape::Torus], 4, 32, 0.01, 3);
        assert_eq!(a, b);
        assert_eq!(a[1].id(), Some("torus_0001"));
    }
}
