use serde::{Deserialize, Serialize};

use super::common::{require, DensityConfig, SolverConfig};
use super::{Context, ExperimentError};
use crate::observables::{entropy_production, EntropyRow, EntropyTrace, ProductionOptions};
use crate::seeding;
use crate::solver::homogeneous::default_reverse_horizon;
use crate::solver::{solve_homogeneous, HomogeneousState, SolveOptions, TimeDirection, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HtheoremParams {
    pub density: DensityConfig,
    pub solver: SolverConfig,
    pub t_final: f64,
    /// Monte Carlo samples per entropy-production estimate.
    pub production_samples: usize,
    /// Estimate the production every this many steps.
    pub production_every: usize,
    pub monotone_slack: f64,
    /// Weight of the initial density mixed into the Maxwellian for the reverse run.
    pub reverse_mixing: f64,
    /// `None` uses a tenth of the Lanford time of the reverse initial data.
    pub reverse_time: Option<f64>,
}

impl Default for HtheoremParams {
    fn default() -> Self {
        Self {
            density: DensityConfig::default(),
            solver: SolverConfig { dt: 0.02, ..SolverConfig::default() },
            t_final: 1.0,
            production_samples: 100_000,
            production_every: 5,
            monotone_slack: 1e-6,
            reverse_mixing: 0.5,
            reverse_time: None,
        }
    }
}

impl HtheoremParams {
    pub(super) fn checked(self, dim: usize, _warnings: &mut Vec<String>) -> Result<Self, ExperimentError> {
        self.density.check(dim)?;
        self.solver.check()?;
        require(self.t_final > 0.0, || "t_final must be positive".into())?;
        require(self.production_samples >= 100 && self.production_every >= 1, || {
            "production_samples >= 100 and production_every >= 1 required".into()
        })?;
        require((0.0..=1.0).contains(&self.reverse_mixing), || "reverse_mixing must lie in [0, 1]".into())?;
        require(self.reverse_time.is_none_or(|t| t > 0.0), || "reverse_time must be positive".into())?;
        Ok(self)
    }
}

fn write_trace<const D: usize>(ctx: &mut Context, name: &str, traj: &Trajectory<D>) -> Result<(), ExperimentError> {
    ctx.out.table(name, |buf| traj.write_trace_csv(buf))?;
    Ok(())
}

pub(super) fn run<const D: usize>(p: &HtheoremParams, ctx: &mut Context) -> Result<(), ExperimentError> {
    let spec = p.density.spec();
    let grid = p.solver.grid::<D>(spec.beta);
    let options: SolveOptions<D> = p.solver.options(seeding::derive_seed(ctx.seed, "quadrature", 0));
    let f0 = HomogeneousState::from_density(grid, |v| spec.velocity_density(v));

    let forward = solve_homogeneous(&f0, p.t_final, p.solver.dt, TimeDirection::Forward, &options)?;
    write_trace(ctx, "htheorem_forward.csv", &forward)?;
    ctx.stage("forward solve");

    let mut worst = f64::NEG_INFINITY;
    for w in forward.trace.windows(2) {
        worst = worst.max(w[1].relative_entropy - w[0].relative_entropy);
    }
    ctx.report.metric("relative_entropy_initial", forward.trace[0].relative_entropy);
    ctx.report.metric("relative_entropy_final", forward.trace.last().map(|t| t.relative_entropy));
    ctx.report.check(
        "relative_entropy_nonincreasing",
        worst <= p.monotone_slack,
        worst,
        p.monotone_slack,
        "largest one-step increase of the relative entropy",
    );

    let mut trace = EntropyTrace::default();
    let mut lowest_z = f64::INFINITY;
    let mut initial_z = f64::NAN;
    for (k, state) in forward.states.iter().enumerate() {
        let last = k + 1 == forward.states.len();
        if k % p.production_every != 0 && !last {
            continue;
        }
        let mut rng = seeding::stream(ctx.seed, "production", k as u64);
        let d = entropy_production(&grid, &state.f, ProductionOptions::new(p.production_samples), &mut rng)?;
        let z = if d.stderr > 0.0 { d.value / d.stderr } else if d.value >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        lowest_z = lowest_z.min(z);
        if k == 0 {
            initial_z = z;
        }
        trace.push(EntropyRow {
            t: state.t,
            entropy: state.entropy(),
            entropy_stderr: 0.0,
            production: d.value,
            production_stderr: d.stderr,
        });
    }
    ctx.out.table("entropy_production.csv", |buf| trace.write_csv(buf))?;
    ctx.report.check("production_nonnegative", lowest_z >= -3.0, lowest_z, -3.0, "smallest D / stderr over the run");
    ctx.report.check("production_positive_initially", initial_z > 5.0, initial_z, 5.0, "D / stderr at t = 0");
    ctx.stage("production estimates");

    let maxwellian = grid.matched_maxwellian(&f0.f);
    let mut rng = seeding::stream(ctx.seed, "production-maxwellian", 0);
    let dm = entropy_production(&grid, &maxwellian, ProductionOptions::new(p.production_samples), &mut rng)?;
    ctx.report.metric("maxwellian_production", dm.value);
    ctx.report.metric("maxwellian_production_stderr", dm.stderr);
    ctx.report.check(
        "maxwellian_production_zero",
        dm.value.abs() <= 3.0 * dm.stderr + 1e-12,
        dm.value,
        3.0 * dm.stderr + 1e-12,
        "|D(M)| within 3 stderr, plus 1e-12 for roundoff",
    );

    // reversed equation from a mixture of the Maxwellian and the initial data
    let a = p.reverse_mixing;
    let mixed: Vec<f64> = maxwellian.iter().zip(&f0.f).map(|(m, f)| (1.0 - a) * m + a * f).collect();
    let g0 = HomogeneousState::new(grid, mixed);
    let horizon = p.reverse_time.unwrap_or_else(|| default_reverse_horizon(&g0));
    let reverse_options = SolveOptions { reverse_horizon: Some(horizon), ..options };
    let dt = p.solver.dt.min(horizon / 4.0);
    let reverse = solve_homogeneous(&g0, horizon, dt, TimeDirection::Reverse, &reverse_options)?;
    write_trace(ctx, "htheorem_reverse.csv", &reverse)?;
    let h_start = reverse.trace[0].relative_entropy;
    let h_end = reverse.trace.last().map(|t| t.relative_entropy).unwrap_or(h_start);
    ctx.report.metric("reverse_horizon", horizon);
    ctx.report.metric("reverse_terminated_early", reverse.terminated_early.as_ref().map(|e| e.to_string()));
    ctx.report.metric("reverse_relative_entropy_change", h_end - h_start);
    ctx.report.check(
        "reverse_relative_entropy_grows",
        h_end > h_start,
        h_end - h_start,
        0.0,
        "the reversed equation moves away from equilibrium",
    );
    ctx.stage("reverse solve");
    Ok(())
}
