use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::common::{
    axis_names, fmt_vec, grid_mass_per_velocity_cell, phase_cell_weights, require, separated_pairs, DensityConfig,
    PhaseGridConfig, SolverConfig,
};
use super::{Context, ExperimentError};
use crate::initial_data::{boltzmann_grad_activity, sample_grand_canonical_with_activity, ConditioningSpec, DensitySpec};
use crate::observables::{chaos_defect, estimate_correlation, MarginalEstimate, MarginalOptions, Normalization};
use crate::seeding;
use crate::sim::{simulate, Configuration};
use crate::solver::{solve_homogeneous, HomogeneousState, TimeDirection};
use crate::torus::free_flight;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterexampleParams {
    pub density: DensityConfig,
    pub eps: f64,
    /// `None` means `eps^{1-d}`.
    pub activity: Option<f64>,
    pub delta: f64,
    /// Accepted replicas per ensemble.
    pub replicas: usize,
    pub marginal_grid: PhaseGridConfig,
    pub chaos_grid: PhaseGridConfig,
    pub probe_pairs: usize,
    pub solver: SolverConfig,
}

impl Default for CounterexampleParams {
    fn default() -> Self {
        Self {
            density: DensityConfig::default(),
            eps: 0.02,
            activity: None,
            delta: 0.05,
            replicas: 4000,
            // unit velocity cells centered on the integers, so each bump sits inside one cell
            marginal_grid: PhaseGridConfig::new(1, 7, Some(3.5)),
            chaos_grid: PhaseGridConfig::new(8, 4, Some(3.0)),
            probe_pairs: 200,
            solver: SolverConfig { nodes: 32, directions: 32, ..SolverConfig::default() },
        }
    }
}

impl CounterexampleParams {
    pub(super) fn checked(self, dim: usize, warnings: &mut Vec<String>) -> Result<Self, ExperimentError> {
        self.density.check(dim)?;
        self.marginal_grid.check("marginal_grid")?;
        self.chaos_grid.check("chaos_grid")?;
        self.solver.check()?;
        require(self.density.is_uniform(), || "the kinetic comparison needs a uniform spatial profile".into())?;
        require(self.eps > 0.0 && self.eps < 0.5 && self.delta > 0.0, || "need 0 < eps < 0.5 and delta > 0".into())?;
        require(self.activity.is_none_or(|a| a > 0.0), || "activity must be positive".into())?;
        require(self.replicas >= 10 && self.probe_pairs >= 1, || "replicas >= 10 and probe_pairs >= 1".into())?;
        if let Some(a) = self.activity {
            super::common::check_scaling(a.round() as usize, self.eps, dim, warnings);
        }
        Ok(self)
    }
}

struct Ensemble<const D: usize> {
    configs: Vec<Configuration<D>>,
    rejected: usize,
}

fn conditioned_ensemble<const D: usize>(
    spec: &DensitySpec,
    p: &CounterexampleParams,
    activity: f64,
    seed: u64,
    stage: &str,
) -> Result<Ensemble<D>, ExperimentError> {
    let conditioning = ConditioningSpec { delta: p.delta };
    let samples: Vec<_> = (0..p.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeding::stream(seed, stage, r as u64);
            sample_grand_canonical_with_activity::<D, _>(spec, p.eps, activity, Some(&conditioning), &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let rejected = samples.iter().map(|s| s.accepted_after).sum();
    Ok(Ensemble { configs: samples.into_iter().map(|s| s.config).collect(), rejected })
}

/// Cell averages of a spatially uniform velocity density held on a solver grid.
fn uniform_cell_values<const D: usize>(state: &HomogeneousState<D>, cells: &crate::observables::PhaseCellGrid<D>) -> Vec<f64> {
    let mass = grid_mass_per_velocity_cell(&state.grid, &state.f, cells, 3);
    let vol = cells.velocity_volume();
    (0..cells.cells()).map(|c| mass[cells.split(c).1] / vol).collect()
}

pub(super) fn run<const D: usize>(p: &CounterexampleParams, ctx: &mut Context) -> Result<(), ExperimentError> {
    let spec = p.density.spec();
    let activity = p.activity.unwrap_or_else(|| boltzmann_grad_activity(p.eps, D));
    ctx.report.metric("activity", activity);

    let a = conditioned_ensemble::<D>(&spec, p, activity, ctx.seed, "counterexample-a")?;
    let b = conditioned_ensemble::<D>(&spec, p, activity, ctx.seed, "counterexample-b")?;
    let proposals = 2 * p.replicas + a.rejected + b.rejected;
    ctx.report.metric("acceptance_rate", (2 * p.replicas) as f64 / proposals as f64);
    let mean_n = a.configs.iter().map(|c| c.len()).sum::<usize>() as f64 / p.replicas as f64;
    let kappa = mean_n / activity;
    ctx.report.metric("mean_particles", mean_n);
    ctx.report.metric("kappa", kappa);
    ctx.stage("conditioned sampling");

    let evolved: Vec<(Configuration<D>, usize)> = a
        .configs
        .par_iter()
        .map(|c| simulate(c, p.delta).map(|(end, log)| (end, log.events.len())))
        .collect::<Result<_, _>>()?;
    let silent = evolved.iter().filter(|(_, k)| *k == 0).count();
    let event_rows: Vec<String> = evolved.iter().enumerate().map(|(r, (c, k))| format!("{r},{},{k}", c.len())).collect();
    ctx.out.rows("counterexample_events.csv", "replica,particles,events", &event_rows)?;
    let silent_fraction = silent as f64 / p.replicas as f64;
    ctx.report.check(
        "no_collisions_before_delta",
        silent == p.replicas,
        silent_fraction,
        1.0,
        "fraction of accepted replicas with an empty event log on [0, delta]",
    );
    let at_delta: Vec<Configuration<D>> = evolved.into_iter().map(|(c, _)| c).collect();
    ctx.stage("hard-sphere flow");

    let cells = p.marginal_grid.grid::<D>(spec.beta);
    let fa = estimate_correlation(&at_delta, 1, &cells, activity)?;
    // free transport of the independent ensemble's initial marginal
    let transported: Vec<Vec<crate::ParticleState<D>>> =
        b.configs.iter().map(|c| c.particles.iter().map(|z| free_flight(z, p.delta)).collect()).collect();
    let fb = estimate_correlation(&transported, 1, &cells, activity)?;

    let grid = p.solver.grid::<D>(spec.beta);
    let f0 = HomogeneousState::from_density(grid, |v| spec.velocity_density(v));
    let dt = p.solver.dt.min(p.delta / 2.0);
    let traj = solve_homogeneous(&f0, p.delta, dt, TimeDirection::Forward, &p.solver.options(seeding::derive_seed(ctx.seed, "quadrature", 0)))?;
    let free_cells = uniform_cell_values(&f0, &cells);
    let boltz_cells = uniform_cell_values(traj.last(), &cells);
    ctx.stage("marginals and solver");

    let (rows, worst_z, best_contrast, best_scaled) = compare(&fa, &fb, &free_cells, &boltz_cells, kappa);
    ctx.out.rows(
        "counterexample_marginal.csv",
        &format!(
            "cell,{},{},f_delta,f_delta_stderr,free_transport,free_transport_stderr,f0,boltzmann,z_free,contrast",
            axis_names("x", D),
            axis_names("v", D)
        ),
        &rows,
    )?;
    ctx.report.check(
        "marginal_matches_free_transport",
        worst_z <= 3.0,
        worst_z,
        3.0,
        "max over cells of |f(delta) - S0(delta) f(0)| / stderr, independent ensembles",
    );
    ctx.report.check(
        "boltzmann_departs_from_free_transport",
        best_contrast > 5.0,
        best_contrast,
        5.0,
        "max over cells of |B(delta) f0 - f0| / stderr of f(delta)",
    );
    ctx.report.metric("scaled_contrast", best_scaled);

    let chaos_cells = p.chaos_grid.grid::<D>(spec.beta);
    let weights = phase_cell_weights(&spec, &chaos_cells);
    let radius = p.eps * p.eps.ln().abs();
    let pairs = separated_pairs(&chaos_cells, radius, p.delta, p.probe_pairs, &weights);
    if pairs.is_empty() {
        return Err(ExperimentError::Config("chaos_grid has no cell pairs outside the bad set".into()));
    }
    let options = MarginalOptions { symmetrized: true, normalization: Normalization::Activity(activity) };
    let defect = chaos_defect(&a.configs, &chaos_cells, &pairs, options)?;
    ctx.out.table("counterexample_chaos.csv", |buf| defect.write_csv(buf))?;
    let fraction = defect.fraction_consistent_with_zero(3.0);
    ctx.report.metric("chaos_pairs", pairs.len());
    ctx.report.metric("chaos_max_defect", defect.max_abs);
    ctx.report.check(
        "chaos_outside_bad_set",
        fraction >= 0.95,
        fraction,
        0.95,
        "fraction of separated cell pairs with |f2 - f1 f1| <= 3 stderr",
    );
    ctx.stage("chaos");
    Ok(())
}

fn compare<const D: usize>(
    fa: &MarginalEstimate<D>,
    fb: &MarginalEstimate<D>,
    free_cells: &[f64],
    boltz_cells: &[f64],
    kappa: f64,
) -> (Vec<String>, f64, f64, f64) {
    let mut rows = Vec::new();
    let (mut worst_z, mut best_contrast, mut best_scaled) = (0.0f64, 0.0f64, 0.0f64);
    for c in 0..fa.values.len() {
        let (x, v) = fa.grid.center(c);
        let sigma = (fa.stderr[c].powi(2) + fb.stderr[c].powi(2)).sqrt();
        let z = if sigma > 0.0 { (fa.values[c] - fb.values[c]).abs() / sigma } else { 0.0 };
        let increment = (boltz_cells[c] - free_cells[c]).abs();
        let contrast = if fa.stderr[c] > 0.0 { increment / fa.stderr[c] } else { 0.0 };
        let scaled = if fa.stderr[c] > 0.0 { kappa * increment / fa.stderr[c] } else { 0.0 };
        worst_z = worst_z.max(z);
        best_contrast = best_contrast.max(contrast);
        best_scaled = best_scaled.max(scaled);
        rows.push(format!(
            "{c},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{z:e},{contrast:e}",
            fmt_vec(x.as_slice()),
            fmt_vec(v.as_slice()),
            fa.values[c],
            fa.stderr[c],
            fb.values[c],
            fb.stderr[c],
            free_cells[c],
            boltz_cells[c]
        ));
    }
    (rows, worst_z, best_contrast, best_scaled)
}
