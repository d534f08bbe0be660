//! Discrete evaluation of the hard-sphere collision operator on a velocity grid.

use rand::Rng;
use rayon::prelude::*;

use super::grid::{Interpolant, VelocityGrid};
use crate::draw::unit_vector;
use crate::vector::{sphere_area, Vector};

/// Quadrature of the impact-direction integral.
#[derive(Clone, Debug)]
pub struct SphereQuadrature<const D: usize> {
    pub directions: Vec<Vector<D>>,
    pub weight: f64,
}

impl<const D: usize> SphereQuadrature<D> {
    /// Equally spaced angles in 2-D, a Fibonacci lattice in 3-D; equal weights.
    pub fn new(count: usize) -> Self {
        assert!(count >= 4);
        let directions = match D {
            2 => (0..count)
                .map(|k| {
                    let th = std::f64::consts::TAU * (k as f64 + 0.5) / count as f64;
                    let mut v = Vector::zero();
                    v[0] = th.cos();
                    v[1] = th.sin();
                    v
                })
                .collect(),
            3 => {
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                (0..count)
                    .map(|k| {
                        let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
                        let r = (1.0 - z * z).sqrt();
                        let phi = golden * k as f64;
                        let mut v = Vector::zero();
                        v[0] = r * phi.cos();
                        v[1] = r * phi.sin();
                        v[2] = z;
                        v
                    })
                    .collect()
            }
            _ => panic!("sphere quadrature implemented for d = 2, 3"),
        };
        Self {
            directions,
            weight: sphere_area(D) / count as f64,
        }
    }

    pub fn default_for_dim() -> Self {
        Self::new(if D == 2 { 32 } else { 64 })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Quadrature {
    /// Full tensor sum over grid nodes and sphere directions.
    Tensor,
    /// Per-node Monte Carlo with this many samples of `(v_1, nu)`.
    MonteCarlo(usize),
}

/// Raw `Q(f,f)` at every node, without conservation correction.
///
/// Collisions whose outgoing velocities leave the grid box are dropped from both the gain and
/// the loss term, so the truncated kernel still has every Maxwellian as an exact zero.
pub fn collision_operator_raw<const D: usize>(
    grid: &VelocityGrid<D>,
    f: &[f64],
    sphere: &SphereQuadrature<D>,
) -> Vec<f64> {
    let interp = Interpolant::new(*grid, f);
    let nodes = grid.nodes();
    let w = grid.weight() * sphere.weight;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let v = nodes[i];
            let fi = f[i];
            let mut gain = 0.0;
            let mut loss = 0.0;
            for (j, v1) in nodes.iter().enumerate() {
                let g = *v1 - v;
                let ff = fi * f[j];
                for nu in &sphere.directions {
                    let c = g.dot(nu);
                    if c <= 0.0 {
                        continue;
                    }
                    let vp = v + *nu * c;
                    let v1p = *v1 - *nu * c;
                    if !grid.contains(&vp) || !grid.contains(&v1p) {
                        continue;
                    }
                    gain += c * (interp.log_eval(&vp) + interp.log_eval(&v1p)).exp();
                    loss += c * ff;
                }
            }
            w * (gain - loss)
        })
        .collect()
}

/// Monte Carlo estimate of `Q(f,f)` at every node, `v_1` uniform in the grid box.
pub fn collision_operator_mc<const D: usize>(
    grid: &VelocityGrid<D>,
    f: &[f64],
    samples: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let interp = Interpolant::new(*grid, f);
    let volume = (2.0 * grid.v_cut).powi(D as i32) * sphere_area(D);
    (0..grid.len())
        .map(|i| {
            let v = grid.node(i);
            let fv = interp.eval(&v);
            let mut acc = 0.0;
            for _ in 0..samples {
                let mut v1 = Vector::<D>::zero();
                for a in 0..D {
                    v1[a] = rng.random_range(-grid.v_cut..grid.v_cut);
                }
                let nu: Vector<D> = unit_vector(rng);
                let c = (v1 - v).dot(&nu);
                if c <= 0.0 || !grid.contains(&(v + nu * c)) || !grid.contains(&(v1 - nu * c)) {
                    continue;
                }
                let gain = (interp.log_eval(&(v + nu * c)) + interp.log_eval(&(v1 - nu * c))).exp();
                acc += c * (gain - fv * interp.eval(&v1));
            }
            volume * acc / samples as f64
        })
        .collect()
}

/// Total collision frequency `∫∫ f(v_1) ((v_1 - v)·nu)_+` at every node, with the same
/// quadrature as the loss term.
pub fn loss_rate<const D: usize>(grid: &VelocityGrid<D>, f: &[f64], sphere: &SphereQuadrature<D>) -> Vec<f64> {
    let nodes = grid.nodes();
    let w = grid.weight() * sphere.weight;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let v = nodes[i];
            let mut acc = 0.0;
            for (j, v1) in nodes.iter().enumerate() {
                let g = *v1 - v;
                let kernel: f64 = sphere.directions.iter().map(|nu| g.dot(nu).max(0.0)).sum();
                acc += f[j] * kernel;
            }
            w * acc
        })
        .collect()
}

/// Removes the components of `q` that change mass, momentum or energy. The correction is
/// `f * (c_0 + c·v + c_e |v|^2)`, which vanishes where `f` does; the coefficients solve the
/// projection in the inner product weighted by `1/f`.
pub fn conservation_correction<const D: usize>(grid: &VelocityGrid<D>, f: &[f64], q: &mut [f64]) {
    let k = D + 2;
    let basis = |v: &Vector<D>| -> Vec<f64> {
        let mut b = Vec::with_capacity(k);
        b.push(1.0);
        b.extend_from_slice(v.as_slice());
        b.push(v.norm_sq());
        b
    };
    let w = grid.weight();
    let mut gram = vec![vec![0.0; k]; k];
    let mut rhs = vec![0.0; k];
    let scale = f.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    for i in 0..grid.len() {
        let phi = basis(&grid.node(i));
        let fi = f[i].max(0.0) + 1e-14 * scale;
        for a in 0..k {
            rhs[a] += q[i] * phi[a] * w;
            for b in 0..k {
                gram[a][b] += fi * phi[a] * phi[b] * w;
            }
        }
    }
    let c = solve_dense(gram, rhs);
    for i in 0..grid.len() {
        let phi = basis(&grid.node(i));
        let fi = f[i].max(0.0) + 1e-14 * scale;
        let corr: f64 = phi.iter().zip(&c).map(|(p, ci)| p * ci).sum();
        q[i] -= fi * corr;
    }
}

/// Gaussian elimination with partial pivoting for the small moment systems.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= factor * a[col][c];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Conservation-corrected collision operator.
pub fn collision_operator<const D: usize>(
    grid: &VelocityGrid<D>,
    f: &[f64],
    sphere: &SphereQuadrature<D>,
    quadrature: Quadrature,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut q = match quadrature {
        Quadrature::Tensor => collision_operator_raw(grid, f, sphere),
        Quadrature::MonteCarlo(samples) => collision_operator_mc(grid, f, samples, rng),
    };
    conservation_correction(grid, f, &mut q);
    q
}
