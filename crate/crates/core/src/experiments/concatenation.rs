use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::common::{axis_names, check_scaling, coincident_grid, factorized_ensemble, fmt_vec, require, scaled_diameter, DensityConfig};
use super::{Context, ExperimentError};
use crate::observables::{PhaseCellGrid, VelocityHistogram};
use crate::seeding;
use crate::sim::{SimOptions, Simulator};
use crate::solver::{solve_homogeneous, HomogeneousState, SolveOptions, SphereQuadrature, TimeDirection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcatenationParams {
    pub density: DensityConfig,
    pub particles: usize,
    pub replicas: usize,
    pub tau: f64,
    /// Final time, after `tau`.
    pub tau_prime: f64,
    pub velocity_bins: usize,
    pub velocity_range: f64,
    pub directions: usize,
    pub dt: f64,
}

impl Default for ConcatenationParams {
    fn default() -> Self {
        Self {
            density: DensityConfig::default(),
            particles: 64,
            replicas: 1000,
            tau: 0.05,
            tau_prime: 0.1,
            velocity_bins: 16,
            velocity_range: 4.0,
            directions: 16,
            dt: 0.005,
        }
    }
}

impl ConcatenationParams {
    pub(super) fn checked(self, dim: usize, warnings: &mut Vec<String>) -> Result<Self, ExperimentError> {
        self.density.check(dim)?;
        require(self.density.is_uniform(), || "the kinetic comparison needs a uniform spatial profile".into())?;
        require(self.particles >= 2 && self.replicas >= 2, || "particles >= 2 and replicas >= 2".into())?;
        require(self.tau > 0.0 && self.tau_prime > self.tau, || "need 0 < tau < tau_prime".into())?;
        require(self.velocity_bins >= 3 && self.velocity_range > 0.0, || "velocity_bins >= 3 and velocity_range > 0".into())?;
        require(self.directions >= 2 && self.dt > 0.0, || "directions >= 2 and dt > 0".into())?;
        check_scaling(self.particles, scaled_diameter(self.particles, dim), dim, warnings);
        Ok(self)
    }
}

fn l1(a: &[f64], b: &[f64], weight: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * weight
}

pub(super) fn run<const D: usize>(p: &ConcatenationParams, ctx: &mut Context) -> Result<(), ExperimentError> {
    let spec = p.density.spec();
    let cells = PhaseCellGrid::<D>::new(1, p.velocity_bins, p.velocity_range);
    let grid = coincident_grid(&cells);
    let options = SolveOptions {
        sphere: SphereQuadrature::new(p.directions),
        seed: seeding::derive_seed(ctx.seed, "quadrature", 0),
        ..SolveOptions::default()
    };
    // one step size that divides both legs
    let first_steps = (p.tau / p.dt).ceil() as usize;
    let dt = p.tau / first_steps as f64;
    let second_steps = ((p.tau_prime - p.tau) / dt).round().max(1.0) as usize;
    if ((p.tau_prime - p.tau) - second_steps as f64 * dt).abs() > 1e-9 {
        ctx.warn(format!("tau_prime - tau is not a multiple of the step {dt}; the semigroup check compares unequal steps"));
    }
    let f0 = HomogeneousState::from_density(grid, |v| spec.velocity_density(v));
    let direct = solve_homogeneous(&f0, p.tau_prime, dt, TimeDirection::Forward, &options)?;
    let first = solve_homogeneous(&f0, p.tau, dt, TimeDirection::Forward, &options)?;
    let mut mid = first.last().clone();
    mid.t = 0.0;
    let second = solve_homogeneous(&mid, p.tau_prime - p.tau, dt, TimeDirection::Forward, &options)?;
    let direct_end = &direct.last().f;
    let peak = direct_end.iter().copied().fold(0.0, f64::max);
    let gap = direct_end.iter().zip(&second.last().f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ctx.report.check(
        "solver_semigroup",
        gap <= 1e-10 * peak,
        gap,
        1e-10 * peak,
        "max |S(tau' - tau) S(tau) f0 - S(tau') f0|",
    );
    let direct_tau = direct
        .states
        .iter()
        .min_by(|a, b| (a.t - p.tau).abs().total_cmp(&(b.t - p.tau).abs()))
        .expect("nonempty")
        .f
        .clone();
    ctx.stage("direct solves");

    let eps = scaled_diameter(p.particles, D);
    let ensemble = factorized_ensemble::<D>(&spec, p.particles, eps, p.replicas, ctx.seed, "concatenation")?;
    let snaps: Vec<(Vec<u64>, Vec<u64>)> = ensemble
        .par_iter()
        .map(|c| -> Result<_, ExperimentError> {
            let mut sim = Simulator::new(c, p.tau_prime, SimOptions::default())?;
            let at_tau = sim.advance_to(p.tau)?;
            let (end, _) = sim.finish()?;
            Ok((
                VelocityHistogram::from_particles(&cells, &at_tau.particles).counts,
                VelocityHistogram::from_particles(&cells, &end.particles).counts,
            ))
        })
        .collect::<Result<_, _>>()?;
    let merge = |parts: Vec<&Vec<u64>>| {
        let mut counts = vec![0u64; cells.velocity_cells()];
        for part in parts {
            counts.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        let total = counts.iter().sum();
        VelocityHistogram { grid: cells, counts, total }
    };
    let hist_tau = merge(snaps.iter().map(|s| &s.0).collect());
    let hist_end = merge(snaps.iter().map(|s| &s.1).collect());
    ctx.stage("particles");

    let restart_state = HomogeneousState::new(grid, hist_tau.densities());
    let restart = solve_homogeneous(&restart_state, p.tau_prime - p.tau, dt, TimeDirection::Forward, &options)?;
    let restart_end = &restart.last().f;
    let w = grid.weight();
    let (hist_tau_f, hist_end_f) = (hist_tau.densities(), hist_end.densities());
    ctx.report.metric("l1_histogram_vs_direct_at_tau", l1(&hist_tau_f, &direct_tau, w));
    ctx.report.metric("l1_restart_vs_direct_at_tau_prime", l1(restart_end, direct_end, w));
    ctx.report.metric("l1_histogram_vs_direct_at_tau_prime", l1(&hist_end_f, direct_end, w));
    ctx.report.metric("l1_restart_vs_histogram_at_tau_prime", l1(restart_end, &hist_end_f, w));

    let rows: Vec<String> = (0..grid.len())
        .map(|i| {
            format!(
                "{},{:e},{:e},{:e},{:e},{:e}",
                fmt_vec(grid.node(i).as_slice()),
                direct_tau[i],
                hist_tau_f[i],
                direct_end[i],
                restart_end[i],
                hist_end_f[i]
            )
        })
        .collect();
    ctx.out.rows(
        "concatenation.csv",
        &format!("{},direct_tau,particles_tau,direct_tau_prime,restart_tau_prime,particles_tau_prime", axis_names("v", D)),
        &rows,
    )?;
    ctx.stage("restart");
    Ok(())
}
