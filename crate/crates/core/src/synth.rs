//! Uniform samples of analytic surfaces with exact normals.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cloud::{scale, unit, PointCloud, Vec3};
use crate::error::{param, Error, Result};

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Unit sphere.
    Sphere,
    /// The square [-1, 1]^2 in the z = 0 plane, normals +z.
    Plane,
    /// Torus around the z axis with radii 1 and 0.3.
    Torus,
    /// Surface of the cube [-1, 1]^3.
    Cube,
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "plane" => Ok(Shape::Plane),
            "torus" => Ok(Shape::Torus),
            "cube" => Ok(Shape::Cube),
            other => param(format!("unknown shape `{other}` (sphere, plane, torus, cube)")),
        }
    }
}

/// Outward torus normal at a point on the surface.
pub fn torus_normal(p: Vec3) -> Vec3 {
    let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let ring = [p[0] / rho * TORUS_MAJOR, p[1] / rho * TORUS_MAJOR, 0.0];
    scale([p[0] - ring[0], p[1] - ring[1], p[2]], 1.0 / TORUS_MINOR)
}

fn sphere_point(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        if let Some(u) = unit(v) {
            return u;
        }
    }
}

/// `n` area-uniform samples with analytic normals.
pub fn sample(shape: Shape, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return param("cannot sample zero points");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, nrm) = match shape {
            Shape::Sphere => {
                let p = sphere_point(&mut rng);
                (p, p)
            }
            Shape::Plane => ([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0], [0.0, 0.0, 1.0]),
            Shape::Torus => loop {
                // The area element is proportional to R + r cos(v).
                let u: f64 = rng.random_range(0.0..TAU);
                let v: f64 = rng.random_range(0.0..TAU);
                let w: f64 = rng.random();
                if w * (TORUS_MAJOR + TORUS_MINOR) <= TORUS_MAJOR + TORUS_MINOR * v.cos() {
                    let n = [v.cos() * u.cos(), v.cos() * u.sin(), v.sin()];
                    let rad = TORUS_MAJOR + TORUS_MINOR * v.cos();
                    break ([rad * u.cos(), rad * u.sin(), TORUS_MINOR * v.sin()], n);
                }
            },
            Shape::Cube => {
                let face = rng.random_range(0..6usize);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                p[axis] = sign;
                let mut nrm = [0.0; 3];
                nrm[axis] = sign;
                (p, nrm)
            }
        };
        positions.push(p);
        normals.push(nrm);
    }
    PointCloud::new(positions, normals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{dist2, norm};

    #[test]
    fn sphere_normals_are_positions() {
        let c = sample(Shape::Sphere, 1000, 1).unwrap();
        for (p, n) in c.positions().iter().zip(c.normals()) {
            assert!((norm(*p) - 1.0).abs() < 1e-9);
            assert_eq!(p, n);
        }
    }

    #[test]
    fn plane_normals_are_up() {
        let c = sample(Shape::Plane, 100, 2).unwrap();
        assert!(c.normals().iter().all(|n| *n == [0.0, 0.0, 1.0]));
        assert!(c.positions().iter().all(|p| p[2] == 0.0));
    }

    #[test]
    fn torus_matches_closed_form() {
        let c = sample(Shape::Torus, 500, 3).unwrap();
        for (p, n) in c.positions().iter().zip(c.normals()) {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let implicit = (rho - TORUS_MAJOR).powi(2) + p[2] * p[2] - TORUS_MINOR * TORUS_MINOR;
            assert!(implicit.abs() < 1e-9);
            assert!(dist2(torus_normal(*p), *n).sqrt() < 1e-9);
        }
    }

    #[test]
    fn cube_points_on_faces() {
        let c = sample(Shape::Cube, 300, 4).unwrap();
        for (p, n) in c.positions().iter().zip(c.normals()) {
            let axis = n.iter().position(|v| *v != 0.0).unwrap();
            assert_eq!(p[axis], n[axis]);
            assert!(p.iter().all(|v| v.abs() <= 1.0));
        }
        assert!("cone".parse::<Shape>().is_err());
    }
}
