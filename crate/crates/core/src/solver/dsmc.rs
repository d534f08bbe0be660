//! Stochastic particle solver for the equation with transport on the torus.
//!
//! Each step moves every particle freely and then, cell by cell, draws candidate pairs under a
//! majorant of the relative speed and accepts them with probability `|g| / g_max`. A pair in a
//! cell of volume `V` collides at rate `scale * c_d |g| / (N V)`, where `c_d` is the angular
//! integral of the kernel, so that the empirical measure follows the equation with the
//! collision operator multiplied by `scale`.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::seeding;
use crate::torus::{wrap_position, ParticleState};
use crate::vector::{positive_cosine_integral, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DsmcError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct DsmcParams {
    /// Multiplier of the collision operator; 1 is the equation as written.
    pub rate_scale: f64,
    pub t_final: f64,
    pub dt: f64,
    pub cells_per_axis: usize,
    /// Keep a snapshot every this many steps (and at the end).
    pub snapshot_every: usize,
    /// Starting per-cell bound on `|g|`; `None` uses three times the rms relative speed.
    pub initial_majorant: Option<f64>,
    pub seed: u64,
}

/// One doubling of a cell's majorant after a candidate pair exceeded it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MajorantUnderflow {
    pub step: usize,
    pub cell: usize,
    pub observed: f64,
    pub new_majorant: f64,
}

#[derive(Clone, Debug)]
pub struct DsmcSnapshot<const D: usize> {
    pub t: f64,
    pub particles: Vec<ParticleState<D>>,
}

#[derive(Clone, Debug)]
pub struct DsmcRun<const D: usize> {
    pub snapshots: Vec<DsmcSnapshot<D>>,
    pub collisions: u64,
    pub candidates: u64,
    pub underflows: Vec<MajorantUnderflow>,
    pub final_majorants: Vec<f64>,
}

pub fn kinetic_energy<const D: usize>(particles: &[ParticleState<D>]) -> f64 {
    particles.iter().map(|p| p.v.norm_sq()).sum()
}

fn cell_index<const D: usize>(x: &Vector<D>, per_axis: usize) -> usize {
    let mut idx = 0;
    for a in (0..D).rev() {
        let k = ((x[a] * per_axis as f64) as usize).min(per_axis - 1);
        idx = idx * per_axis + k;
    }
    idx
}

/// Impact direction for relative velocity `g`, distributed as `(g·nu)_+` on the sphere.
pub fn sample_impact_direction<const D: usize, R: Rng + ?Sized>(g: &Vector<D>, rng: &mut R) -> Vector<D> {
    let axis = g.normalized().unwrap_or(Vector::unit(0));
    // orthonormal complement by Gram-Schmidt against random directions
    let perp = |rng: &mut R, avoid: &[Vector<D>]| loop {
        let mut w: Vector<D> = crate::draw::standard_normal(rng);
        // twice, so near-parallel draws still come out orthogonal
        for _ in 0..2 {
            for a in avoid {
                w = w - *a * w.dot(a);
            }
        }
        if let Some(u) = w.normalized() {
            break u;
        }
    };
    match D {
        2 => {
            let s: f64 = 2.0 * rng.random::<f64>() - 1.0;
            let c = (1.0 - s * s).sqrt();
            let mut e = Vector::zero();
            e[0] = -axis[1];
            e[1] = axis[0];
            axis * c + e * s
        }
        3 => {
            let c = rng.random::<f64>().sqrt();
            let s = (1.0 - c * c).sqrt();
            let e = perp(rng, &[axis]);
            axis * c + e * s
        }
        _ => panic!("impact sampling implemented for d = 2, 3"),
    }
}

/// Runs the particle solver. Particles carry equal mass `1 / N`.
pub fn dsmc_run<const D: usize>(
    initial: Vec<ParticleState<D>>,
    params: &DsmcParams,
) -> Result<DsmcRun<D>, DsmcError> {
    let n = initial.len();
    if n < 2 || params.dt <= 0.0 || params.t_final < 0.0 || params.cells_per_axis == 0 || params.rate_scale < 0.0 {
        return Err(DsmcError::InvalidParameters(format!("{params:?} with {n} particles")));
    }
    let cells = params.cells_per_axis.pow(D as u32);
    let cell_volume = 1.0 / cells as f64;
    let c_d = positive_cosine_integral(D);
    let pair_rate = params.rate_scale * c_d / (n as f64 * cell_volume);
    let steps = ((params.t_final / params.dt) - 1e-9).ceil().max(0.0) as usize;
    let dt = if steps > 0 { params.t_final / steps as f64 } else { params.dt };

    let start = params.initial_majorant.unwrap_or_else(|| {
        let mean: Vector<D> = initial.iter().fold(Vector::zero(), |acc, p| acc + p.v) * (1.0 / n as f64);
        let var = initial.iter().map(|p| (p.v - mean).norm_sq()).sum::<f64>() / n as f64;
        3.0 * (2.0 * var).sqrt()
    });
    let mut majorants = vec![start.max(1e-12); cells];
    let mut particles = initial;
    let mut snapshots = vec![DsmcSnapshot { t: 0.0, particles: particles.clone() }];
    let mut underflows = Vec::new();
    let mut collisions = 0u64;
    let mut candidates = 0u64;

    for step in 1..=steps {
        for p in particles.iter_mut() {
            p.x = wrap_position(p.x + p.v * dt);
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); cells];
        for (i, p) in particles.iter().enumerate() {
            members[cell_index(&p.x, params.cells_per_axis)].push(i);
        }
        let velocities: Vec<Vector<D>> = particles.iter().map(|p| p.v).collect();
        let results: Vec<_> = members
            .par_iter()
            .enumerate()
            .map(|(cell, idx)| {
                let mut rng = seeding::stream(params.seed, "dsmc-collide", (step * cells + cell) as u64);
                let mut local: Vec<Vector<D>> = idx.iter().map(|&i| velocities[i]).collect();
                let mut g_max = majorants[cell];
                let mut log = Vec::new();
                let (mut hits, mut tries) = (0u64, 0u64);
                let m = local.len();
                if m >= 2 {
                    let expected = 0.5 * (m * (m - 1)) as f64 * pair_rate * g_max * dt;
                    let mut count = expected.floor() as u64;
                    if rng.random::<f64>() < expected - expected.floor() {
                        count += 1;
                    }
                    // each candidate is thinned against the majorant in force when it was drawn
                    let mut remaining = count as f64;
                    while remaining > 0.0 {
                        if remaining < 1.0 && rng.random::<f64>() >= remaining {
                            break;
                        }
                        remaining -= 1.0;
                        tries += 1;
                        let a = rng.random_range(0..m);
                        let mut b = rng.random_range(0..m - 1);
                        if b >= a {
                            b += 1;
                        }
                        let g = local[b] - local[a];
                        let speed = g.norm();
                        if speed > g_max {
                            // rescale the pending candidate budget to the larger majorant
                            let mut new_max = g_max;
                            while new_max < speed {
                                new_max *= 2.0;
                            }
                            log.push(MajorantUnderflow { step, cell, observed: speed, new_majorant: new_max });
                            remaining *= new_max / g_max;
                            g_max = new_max;
                        }
                        if rng.random::<f64>() * g_max < speed {
                            let nu = sample_impact_direction(&g, &mut rng);
                            let c = g.dot(&nu);
                            local[a] += nu * c;
                            local[b] -= nu * c;
                            hits += 1;
                        }
                    }
                }
                (local, g_max, log, hits, tries)
            })
            .collect();
        for (cell, (local, g_max, log, hits, tries)) in results.into_iter().enumerate() {
            for (k, &i) in members[cell].iter().enumerate() {
                particles[i].v = local[k];
            }
            majorants[cell] = g_max;
            for u in &log {
                log::info!("dsmc majorant doubled: {u:?}");
            }
            underflows.extend(log);
            collisions += hits;
            candidates += tries;
        }
        if step % params.snapshot_every.max(1) == 0 || step == steps {
            snapshots.push(DsmcSnapshot { t: step as f64 * dt, particles: particles.clone() });
        }
    }
    Ok(DsmcRun { snapshots, collisions, candidates, underflows, final_majorants: majorants })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draw::{standard_normal, uniform_position};
    use rand::SeedableRng;

    #[test]
    fn impact_direction_law_2d() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = Vector([0.3, -1.2]);
        let e = g.normalized().unwrap();
        let samples = 100_000;
        let mut mean_cos = 0.0;
        for _ in 0..samples {
            let nu = sample_impact_direction(&g, &mut rng);
            let c = nu.dot(&e);
            assert!(c >= -1e-12 && (nu.norm() - 1.0).abs() < 1e-12, "{nu:?} {c} {}", nu.norm() - 1.0);
            mean_cos += c;
        }
        // E[cos] under density cos/2 on (-pi/2, pi/2) is pi/4
        assert!((mean_cos / samples as f64 - std::f64::consts::FRAC_PI_4).abs() < 0.005);
    }

    #[test]
    fn impact_direction_law_3d() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g = Vector([0.3, -1.2, 0.4]);
        let e = g.normalized().unwrap();
        let samples = 100_000;
        let mut mean_cos = 0.0;
        for _ in 0..samples {
            mean_cos += sample_impact_direction(&g, &mut rng).dot(&e);
        }
        // density 2 cos sin on (0, pi/2): E[cos] = 2/3
        assert!((mean_cos / samples as f64 - 2.0 / 3.0).abs() < 0.005);
    }

    #[test]
    fn energy_and_momentum_conserved() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let particles: Vec<ParticleState<2>> = (0..2000)
            .map(|_| ParticleState::new(uniform_position(&mut rng), standard_normal(&mut rng)))
            .collect();
        let e0 = kinetic_energy(&particles);
        let params = DsmcParams {
            rate_scale: 1.0,
            t_final: 0.5,
            dt: 0.05,
            cells_per_axis: 4,
            snapshot_every: 5,
            initial_majorant: Some(0.5),
            seed: 1,
        };
        let run = dsmc_run(particles, &params).unwrap();
        assert!(run.collisions > 100);
        assert!(!run.underflows.is_empty());
        let last = &run.snapshots.last().unwrap().particles;
        assert!((kinetic_energy(last) - e0).abs() < 1e-10 * e0);
        assert_eq!(run.snapshots.len(), 3);
    }

    #[test]
    fn collision_count_matches_rate() {
        // Maxwellian at unit temperature: mean relative speed sqrt(pi) in 2-D, so each
        // particle collides at rate c_d * sqrt(pi) = 2 sqrt(pi).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let n = 20_000;
        let particles: Vec<ParticleState<2>> = (0..n)
            .map(|_| ParticleState::new(uniform_position(&mut rng), standard_normal(&mut rng)))
            .collect();
        let params = DsmcParams {
            rate_scale: 1.0,
            t_final: 0.1,
            dt: 0.01,
            cells_per_axis: 8,
            snapshot_every: 10,
            initial_majorant: None,
            seed: 2,
        };
        let run = dsmc_run(particles, &params).unwrap();
        let expected = 0.5 * n as f64 * 2.0 * std::f64::consts::PI.sqrt() * 0.1;
        let rel = (run.collisions as f64 - expected).abs() / expected;
        assert!(rel < 0.03, "collisions {} expected {expected}", run.collisions);
    }
}
