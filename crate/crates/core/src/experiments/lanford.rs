use serde::{Deserialize, Serialize};

use super::common::{
    axis_names, check_scaling, factorized_ensemble, fmt_vec, grid_mass_per_velocity_cell, lanford_bound, phase_cell_weights,
    require, scaled_diameter, separated_pairs, simulate_ensemble, DensityConfig, PhaseGridConfig, SolverConfig,
};
use super::{Context, ExperimentError};
use crate::observables::{chaos_defect, estimate_marginal, MarginalOptions};
use crate::seeding;
use crate::sim::PathologyFlag;
use crate::solver::{solve_homogeneous, HomogeneousState, TimeDirection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LanfordParams {
    pub density: DensityConfig,
    pub particles: Vec<usize>,
    pub replicas: usize,
    pub t: f64,
    pub grid: PhaseGridConfig,
    /// Grid for the order-2 probes.
    pub pair_grid: PhaseGridConfig,
    /// Radius of the backward bad set excluded from the order-2 probes; `None` uses the
    /// largest diameter of the sweep.
    pub eps0: Option<f64>,
    pub probe_pairs: usize,
    pub solver: SolverConfig,
}

impl Default for LanfordParams {
    fn default() -> Self {
        Self {
            density: DensityConfig::default(),
            particles: vec![64, 128, 256],
            replicas: 1000,
            t: 0.05,
            grid: PhaseGridConfig::new(1, 8, Some(4.0)),
            pair_grid: PhaseGridConfig::new(4, 4, Some(3.0)),
            eps0: None,
            probe_pairs: 100,
            solver: SolverConfig::default(),
        }
    }
}

impl LanfordParams {
    pub(super) fn checked(self, dim: usize, warnings: &mut Vec<String>) -> Result<Self, ExperimentError> {
        self.density.check(dim)?;
        self.grid.check("grid")?;
        self.pair_grid.check("pair_grid")?;
        self.solver.check()?;
        require(self.density.is_uniform(), || "the solver comparison needs a uniform spatial profile".into())?;
        require(!self.particles.is_empty() && self.particles.iter().all(|&n| n >= 2), || "particles needs entries >= 2".into())?;
        require(self.replicas >= 2 && self.t > 0.0 && self.probe_pairs >= 1, || "replicas >= 2, t > 0, probe_pairs >= 1".into())?;
        require(self.eps0.is_none_or(|e| e > 0.0), || "eps0 must be positive".into())?;
        let bound = lanford_bound(&self.density.spec(), dim)?;
        if self.t > bound.t_star {
            warnings.push(format!("t = {} exceeds the Lanford time {:.4}", self.t, bound.t_star));
        }
        for &n in &self.particles {
            check_scaling(n, scaled_diameter(n, dim), dim, warnings);
        }
        Ok(self)
    }
}

pub(super) fn run<const D: usize>(p: &LanfordParams, ctx: &mut Context) -> Result<(), ExperimentError> {
    let spec = p.density.spec();
    let bound = lanford_bound(&spec, D)?;
    ctx.report.metric("t_star", bound.t_star);

    let grid = p.solver.grid::<D>(spec.beta);
    let f0 = HomogeneousState::from_density(grid, |v| spec.velocity_density(v));
    let traj = solve_homogeneous(&f0, p.t, p.solver.dt.min(p.t / 2.0), TimeDirection::Forward, &p.solver.options(seeding::derive_seed(ctx.seed, "quadrature", 0)))?;
    let cells = p.grid.grid::<D>(spec.beta);
    let vol = cells.velocity_volume();
    let per_cell = |state: &HomogeneousState<D>| -> Vec<f64> {
        let mass = grid_mass_per_velocity_cell(&state.grid, &state.f, &cells, 3);
        (0..cells.cells()).map(|c| mass[cells.split(c).1] / vol).collect()
    };
    let boltz = per_cell(traj.last());
    let free = per_cell(&f0);
    ctx.stage("solver");

    let pair_cells = p.pair_grid.grid::<D>(spec.beta);
    let eps0 = p.eps0.unwrap_or_else(|| p.particles.iter().map(|&n| scaled_diameter(n, D)).fold(0.0, f64::max));
    let pairs = separated_pairs(&pair_cells, eps0, p.t, p.probe_pairs, &phase_cell_weights(&spec, &pair_cells));
    ctx.report.metric("order2_probe_pairs", pairs.len());

    let mut trend = Vec::new();
    let mut mass_error = 0.0f64;
    let mut flagged = 0usize;
    for &n in &p.particles {
        let eps = scaled_diameter(n, D);
        let ensemble = factorized_ensemble::<D>(&spec, n, eps, p.replicas, ctx.seed, &format!("lanford-N{n}"))?;
        let runs = simulate_ensemble(&ensemble, p.t)?;
        let events: usize = runs.iter().map(|(_, log)| log.events.len()).sum();
        flagged += runs.iter().filter(|(_, log)| log.flags.contains(&PathologyFlag::EventAccumulation)).count();
        let finals: Vec<_> = runs.into_iter().map(|(c, _)| c).collect();
        let marginal = estimate_marginal(&finals, 1, &cells, MarginalOptions::default())?;
        mass_error = mass_error.max((marginal.total_mass() - 1.0).abs());

        let mut rows = Vec::new();
        let (mut l1_boltz, mut l1_free, mut max_z) = (0.0, 0.0, 0.0f64);
        for c in 0..cells.cells() {
            let (x, v) = cells.center(c);
            let (value, se) = (marginal.values[c], marginal.stderr[c]);
            let z = if se > 0.0 { (value - boltz[c]) / se } else { 0.0 };
            l1_boltz += (value - boltz[c]).abs() * cells.cell_volume();
            l1_free += (value - free[c]).abs() * cells.cell_volume();
            max_z = max_z.max(z.abs());
            rows.push(format!(
                "{c},{},{},{value:e},{se:e},{:e},{:e},{z:e}",
                fmt_vec(x.as_slice()),
                fmt_vec(v.as_slice()),
                boltz[c],
                free[c]
            ));
        }
        ctx.out.rows(
            &format!("lanford_marginal_N{n}.csv"),
            &format!("cell,{},{},particles,particles_stderr,boltzmann,free_transport,z", axis_names("x", D), axis_names("v", D)),
            &rows,
        )?;

        let order2 = if pairs.is_empty() { None } else { Some(chaos_defect(&finals, &pair_cells, &pairs, MarginalOptions::default())?) };
        if let Some(d) = &order2 {
            ctx.out.table(&format!("lanford_pairs_N{n}.csv"), |buf| d.write_csv(buf))?;
        }
        let (m2, m2_se) = order2.as_ref().map(|d| (d.max_abs.value, d.max_abs.stderr)).unwrap_or((f64::NAN, f64::NAN));
        trend.push(format!(
            "{n},{eps:e},{:e},{l1_boltz:e},{l1_free:e},{max_z:e},{m2:e},{m2_se:e}",
            events as f64 / (n * p.replicas) as f64
        ));
        ctx.stage(&format!("N = {n}"));
    }
    ctx.out.rows(
        "lanford_trend.csv",
        "N,eps,collisions_per_particle,l1_vs_boltzmann,l1_vs_free_transport,max_abs_z,order2_max_defect,order2_stderr",
        &trend,
    )?;
    ctx.report.check("marginals_normalized", mass_error < 1e-9, mass_error, 1e-9, "|total mass - 1| of the estimated marginals");
    ctx.report.check("no_event_accumulation", flagged == 0, flagged as f64, 0.0, "replicas flagged for event accumulation");
    Ok(())
}
