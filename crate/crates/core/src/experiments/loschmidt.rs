use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::common::{
    check_scaling, coincident_grid, factorized_ensemble, lanford_bound, require, scaled_diameter, DensityConfig,
};
use super::{Context, ExperimentError};
use crate::observables::{EntropyRow, EntropyTrace, PhaseCellGrid, VelocityHistogram};
use crate::seeding;
use crate::sim::{Configuration, SimOptions, Simulator};
use crate::solver::{solve_homogeneous, HomogeneousState, SolveOptions, SphereQuadrature, TimeDirection, Trajectory};
use crate::stats::Estimate;
use crate::torus::minimal_image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoschmidtParams {
    pub density: DensityConfig,
    pub particles: usize,
    pub eps: Option<f64>,
    pub replicas: usize,
    /// `None` means half the Lanford time.
    pub tau: Option<f64>,
    /// Snapshots per leg.
    pub checkpoints: usize,
    /// Velocity histogram; the solver runs on the grid of its bin centers.
    pub velocity_bins: usize,
    pub velocity_range: f64,
    pub directions: usize,
    pub dt: f64,
    pub return_tolerance: f64,
    pub significance: f64,
}

impl Default for LoschmidtParams {
    fn default() -> Self {
        Self {
            density: DensityConfig::default(),
            particles: 64,
            eps: None,
            replicas: 2000,
            tau: None,
            checkpoints: 10,
            velocity_bins: 16,
            velocity_range: 4.0,
            directions: 16,
            dt: 0.005,
            return_tolerance: 1e-6,
            significance: 5.0,
        }
    }
}

impl LoschmidtParams {
    pub(super) fn checked(self, dim: usize, warnings: &mut Vec<String>) -> Result<Self, ExperimentError> {
        self.density.check(dim)?;
        require(self.density.is_uniform(), || "the kinetic comparison needs a uniform spatial profile".into())?;
        require(self.particles >= 2 && self.replicas >= 2 && self.checkpoints >= 1, || {
            "particles >= 2, replicas >= 2, checkpoints >= 1".into()
        })?;
        require(self.velocity_bins >= 3 && self.velocity_range > 0.0, || "velocity_bins >= 3 and velocity_range > 0".into())?;
        require(self.directions >= 2 && self.dt > 0.0, || "directions >= 2 and dt > 0".into())?;
        require(self.tau.is_none_or(|t| t > 0.0) && self.eps.is_none_or(|e| e > 0.0), || "tau and eps must be positive".into())?;
        let bound = lanford_bound(&self.density.spec(), dim)?;
        if self.tau.is_some_and(|t| t >= bound.t_star) {
            warnings.push(format!("tau exceeds the Lanford time {:.4}", bound.t_star));
        }
        check_scaling(self.particles, self.eps.unwrap_or_else(|| scaled_diameter(self.particles, dim)), dim, warnings);
        Ok(self)
    }
}

struct ReplicaRecord {
    /// Velocity-cell counts at each checkpoint, forward leg then reversed leg.
    counts: Vec<Vec<u64>>,
    position_error: f64,
    velocity_error: f64,
    events: usize,
}

fn histogram_counts<const D: usize>(cells: &PhaseCellGrid<D>, config: &Configuration<D>) -> Vec<u64> {
    VelocityHistogram::from_particles(cells, &config.particles).counts
}

fn round_trip<const D: usize>(
    start: &Configuration<D>,
    tau: f64,
    checkpoints: usize,
    cells: &PhaseCellGrid<D>,
) -> Result<ReplicaRecord, ExperimentError> {
    let mut counts = Vec::with_capacity(2 * checkpoints + 1);
    let mut sim = Simulator::new(start, tau, SimOptions::default())?;
    counts.push(histogram_counts(cells, start));
    for k in 1..checkpoints {
        counts.push(histogram_counts(cells, &sim.advance_to(tau * k as f64 / checkpoints as f64)?));
    }
    let (middle, first_log) = sim.finish()?;
    counts.push(histogram_counts(cells, &middle));
    let reversed = middle.reverse_velocities();
    let mut sim = Simulator::new(&reversed, tau, SimOptions::default())?;
    for k in 1..checkpoints {
        counts.push(histogram_counts(cells, &sim.advance_to(tau * k as f64 / checkpoints as f64)?));
    }
    let (end, second_log) = sim.finish()?;
    counts.push(histogram_counts(cells, &end));
    let back = end.reverse_velocities();
    let mut position_error = 0.0f64;
    let mut velocity_error = 0.0f64;
    for (a, b) in start.particles.iter().zip(&back.particles) {
        let dx = minimal_image(&a.x, &b.x);
        for k in 0..D {
            position_error = position_error.max(dx[k].abs());
            velocity_error = velocity_error.max((a.v[k] - b.v[k]).abs());
        }
    }
    Ok(ReplicaRecord { counts, position_error, velocity_error, events: first_log.events.len() + second_log.events.len() })
}

fn boltzmann_rows<const D: usize>(traj: &Trajectory<D>, offset: f64, every: usize) -> Vec<EntropyRow> {
    traj.trace
        .iter()
        .enumerate()
        .filter(|(k, _)| k % every == 0)
        .map(|(_, p)| EntropyRow { t: offset + p.t, entropy: p.entropy, entropy_stderr: 0.0, production: p.production, production_stderr: 0.0 })
        .collect()
}

pub(super) fn run<const D: usize>(p: &LoschmidtParams, ctx: &mut Context) -> Result<(), ExperimentError> {
    let spec = p.density.spec();
    let bound = lanford_bound(&spec, D)?;
    let tau = p.tau.unwrap_or(0.5 * bound.t_star);
    let eps = p.eps.unwrap_or_else(|| scaled_diameter(p.particles, D));
    ctx.report.metric("t_star", bound.t_star);
    ctx.report.metric("tau", tau);

    let cells = PhaseCellGrid::<D>::new(1, p.velocity_bins, p.velocity_range);
    let ensemble = factorized_ensemble::<D>(&spec, p.particles, eps, p.replicas, ctx.seed, "loschmidt")?;
    let records: Vec<ReplicaRecord> = ensemble
        .par_iter()
        .map(|c| round_trip(c, tau, p.checkpoints, &cells))
        .collect::<Result<_, _>>()?;
    ctx.stage("round trips");

    let snapshots = 2 * p.checkpoints + 1;
    let mut totals = vec![vec![0u64; cells.velocity_cells()]; snapshots];
    for r in &records {
        for (acc, c) in totals.iter_mut().zip(&r.counts) {
            acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
    }
    let histograms: Vec<VelocityHistogram<D>> = totals
        .into_iter()
        .map(|counts| {
            let total = counts.iter().sum();
            VelocityHistogram { grid: cells, counts, total }
        })
        .collect();
    let entropies: Vec<Estimate> = histograms.iter().map(|h| h.entropy()).collect();
    let times: Vec<f64> = (0..snapshots).map(|k| 2.0 * tau * k as f64 / (snapshots - 1) as f64).collect();

    let position_error = records.iter().map(|r| r.position_error).fold(0.0, f64::max);
    let velocity_error = records.iter().map(|r| r.velocity_error).fold(0.0, f64::max);
    let events = records.iter().map(|r| r.events).sum::<usize>() as f64 / p.replicas as f64;
    let error_rows: Vec<String> = records
        .iter()
        .enumerate()
        .map(|(k, r)| format!("{k},{},{:e},{:e}", r.events, r.position_error, r.velocity_error))
        .collect();
    ctx.out.rows("return_error.csv", "replica,events,position_error,velocity_error", &error_rows)?;
    ctx.report.metric("events_per_replica", events);
    ctx.report.metric("velocity_return_error", velocity_error);
    ctx.report.check(
        "microscopic_return",
        position_error < p.return_tolerance,
        position_error,
        p.return_tolerance,
        "max per-coordinate position error after the round trip",
    );

    let mut particle_trace = EntropyTrace::default();
    for (t, s) in times.iter().zip(&entropies) {
        particle_trace.push(EntropyRow { t: *t, entropy: s.value, entropy_stderr: s.stderr, production: f64::NAN, production_stderr: f64::NAN });
    }
    ctx.out.table("entropy_particles.csv", |buf| particle_trace.write_csv(buf))?;

    // kinetic evolution from the histogram at tau (reversed ensemble) and, for reference, from t = 0
    let grid = coincident_grid(&cells);
    let options = SolveOptions {
        sphere: SphereQuadrature::new(p.directions),
        seed: seeding::derive_seed(ctx.seed, "quadrature", 0),
        ..SolveOptions::default()
    };
    let leg = tau / p.checkpoints as f64;
    let substeps = (leg / p.dt).ceil().max(1.0) as usize;
    let dt = leg / substeps as f64;
    let from = |h: &VelocityHistogram<D>| HomogeneousState::new(grid, h.densities());
    let after_reversal = solve_homogeneous(&from(&histograms[p.checkpoints]), tau, dt, TimeDirection::Forward, &options)?;
    let from_start = solve_homogeneous(&from(&histograms[0]), 2.0 * tau, dt, TimeDirection::Forward, &options)?;
    let mut kinetic = EntropyTrace::default();
    boltzmann_rows(&after_reversal, tau, substeps).into_iter().for_each(|r| kinetic.push(r));
    ctx.out.table("entropy_boltzmann.csv", |buf| kinetic.write_csv(buf))?;
    let mut reference = EntropyTrace::default();
    boltzmann_rows(&from_start, 0.0, substeps).into_iter().for_each(|r| reference.push(r));
    ctx.out.table("entropy_boltzmann_from_start.csv", |buf| reference.write_csv(buf))?;
    ctx.stage("kinetic solves");

    let s_kinetic = after_reversal.trace.last().expect("nonempty trace").entropy;
    let s_end = entropies[snapshots - 1];
    let s_mid = entropies[p.checkpoints];
    let divergence = s_kinetic - s_end.value;
    let sigma = (s_end.stderr.powi(2) + s_mid.stderr.powi(2)).sqrt();
    let z = divergence / sigma;
    ctx.report.metric("entropy_start", entropies[0].value);
    ctx.report.metric("entropy_tau", s_mid.value);
    ctx.report.metric("entropy_particles_end", s_end.value);
    ctx.report.metric("entropy_boltzmann_end", s_kinetic);
    ctx.report.metric("divergence", divergence);
    ctx.report.metric("divergence_stderr", sigma);
    ctx.report.metric("retrace_gap", s_end.value - entropies[0].value);
    ctx.report.check(
        "kinetic_entropy_fails_to_retrace",
        z > p.significance,
        z,
        p.significance,
        "(S_boltzmann(2 tau) - S_particles(2 tau)) / stderr",
    );
    Ok(())
}
