//! Elementary random draws on the torus, spheres and balls.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::vector::Vector;

pub fn uniform_position<const D: usize, R: Rng + ?Sized>(rng: &mut R) -> Vector<D> {
    let mut x = Vector::zero();
    for k in 0..D {
        x[k] = rng.random::<f64>();
    }
    x
}

pub fn standard_normal<const D: usize, R: Rng + ?Sized>(rng: &mut R) -> Vector<D> {
    let mut v = Vector::zero();
    for k in 0..D {
        v[k] = rng.sample(StandardNormal);
    }
    v
}

/// Uniform point on `S^{D-1}`.
pub fn unit_vector<const D: usize, R: Rng + ?Sized>(rng: &mut R) -> Vector<D> {
    loop {
        if let Some(u) = standard_normal::<D, R>(rng).normalized() {
            return u;
        }
    }
}

/// Uniform point in the closed ball of radius `radius`, by rejection from the cube.
pub fn uniform_in_ball<const D: usize, R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Vector<D> {
    loop {
        let mut v = Vector::zero();
        for k in 0..D {
            v[k] = rng.random_range(-1.0..=1.0);
        }
        if v.norm_sq() <= 1.0 {
            return v * radius;
        }
    }
}
