use serde::{Deserialize, Serialize};

use super::common::{fmt_vec, lanford_bound, require, DensityConfig, SolverConfig};
use super::{Context, ExperimentError};
use crate::initial_data::DensitySpec;
use crate::seeding;
use crate::stats::log_log_slope;
use crate::trees::{enumerate_trees, evaluate_series_term, write_series_csv, SeriesOptions, SeriesTerm, Variant};
use crate::solver::{solve_homogeneous, HomogeneousState, TimeDirection};
use crate::{ParticleState, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeVsSolverParams {
    pub density: DensityConfig,
    pub solver: SolverConfig,
    /// Evaluation time as a fraction of the Lanford time, unless `time` is given.
    pub time_fraction: f64,
    pub time: Option<f64>,
    pub max_order: usize,
    pub samples: usize,
    pub position: Vec<f64>,
    /// Snapped to the nearest solver node.
    pub velocity: Vec<f64>,
    pub relative_tolerance: f64,
    pub slope_times: Vec<f64>,
    pub slope_samples: usize,
    pub slope_tolerance: f64,
    pub max_tree_roots: usize,
    pub max_tree_added: usize,
}

impl Default for TreeVsSolverParams {
    fn default() -> Self {
        Self {
            density: DensityConfig::default(),
            solver: SolverConfig { nodes: 32, directions: 32, ..SolverConfig::default() },
            time_fraction: 0.1,
            time: None,
            max_order: 3,
            samples: 200_000,
            position: vec![],
            velocity: vec![],
            relative_tolerance: 0.02,
            slope_times: vec![0.01, 0.02, 0.04],
            slope_samples: 20_000,
            slope_tolerance: 0.3,
            max_tree_roots: 4,
            max_tree_added: 5,
        }
    }
}

impl TreeVsSolverParams {
    pub(super) fn checked(self, dim: usize, _warnings: &mut Vec<String>) -> Result<Self, ExperimentError> {
        self.density.check(dim)?;
        self.solver.check()?;
        require(self.density.is_uniform(), || "the homogeneous comparison needs a uniform spatial profile".into())?;
        require(self.time_fraction > 0.0 && self.time.is_none_or(|t| t > 0.0), || "evaluation time must be positive".into())?;
        require(self.max_order >= 1 && self.max_order <= 5, || "max_order must lie in 1..=5".into())?;
        require(self.samples >= 100 && self.slope_samples >= 100, || "at least 100 samples per term".into())?;
        require(self.slope_times.len() >= 2 && self.slope_times.iter().all(|&t| t > 0.0), || {
            "slope_times needs two positive times".into()
        })?;
        for (what, v) in [("position", &self.position), ("velocity", &self.velocity)] {
            require(v.is_empty() || v.len() == dim, || format!("{what} must have {dim} components"))?;
        }
        require(self.max_tree_roots >= 1 && self.max_tree_added <= 6, || "tree-count ranges out of bounds".into())?;
        Ok(self)
    }
}

fn rising_factorial(n: usize, s: usize) -> u128 {
    (0..s).map(|k| (n + k) as u128).product()
}

fn terms<const D: usize>(
    spec: &DensitySpec,
    z: &ParticleState<D>,
    t: f64,
    orders: std::ops::RangeInclusive<usize>,
    samples: usize,
    seed: u64,
    stage: &str,
) -> Result<Vec<SeriesTerm>, ExperimentError> {
    orders
        .map(|s| {
            let mut rng = seeding::stream(seed, stage, s as u64);
            let options = SeriesOptions { samples, proposal_beta: None };
            Ok(evaluate_series_term(1, s, t, spec, std::slice::from_ref(z), Variant::Boltzmann, options, &mut rng)?)
        })
        .collect()
}

pub(super) fn run<const D: usize>(p: &TreeVsSolverParams, ctx: &mut Context) -> Result<(), ExperimentError> {
    let spec = p.density.spec();
    let bound = lanford_bound(&spec, D)?;
    let t = p.time.unwrap_or(p.time_fraction * bound.t_star);
    ctx.report.metric("t_star", bound.t_star);
    ctx.report.metric("t", t);

    let grid = p.solver.grid::<D>(spec.beta);
    let target = if p.velocity.is_empty() { Vector::zero() } else { Vector::from_slice(&p.velocity).expect("checked length") };
    let node = (0..grid.len())
        .min_by(|&a, &b| (grid.node(a) - target).norm_sq().total_cmp(&(grid.node(b) - target).norm_sq()))
        .expect("nonempty grid");
    let x = if p.position.is_empty() { Vector([0.5; D]) } else { Vector::from_slice(&p.position).expect("checked length") };
    let z = ParticleState { x, v: grid.node(node) };

    let series = terms(&spec, &z, t, 0..=p.max_order, p.samples, ctx.seed, "series")?;
    ctx.stage("series terms");
    let f0 = HomogeneousState::from_density(grid, |v| spec.velocity_density(v));
    let dt = p.solver.dt.min(t / 4.0);
    let traj = solve_homogeneous(&f0, t, dt, TimeDirection::Forward, &p.solver.options(seeding::derive_seed(ctx.seed, "quadrature", 0)))?;
    let solved = traj.last().f[node];
    let initial = f0.f[node];
    ctx.stage("solver");

    let partial: f64 = series.iter().map(|s| s.estimate.value).sum();
    let partial_se = series.iter().map(|s| s.estimate.stderr.powi(2)).sum::<f64>().sqrt();
    let tolerance = (3.0 * partial_se).max(p.relative_tolerance * solved.abs());
    ctx.out.rows(
        "series_vs_solver.csv",
        &format!("t,{},{},f0,partial_sum,partial_sum_stderr,solver", super::common::axis_names("x", D), super::common::axis_names("v", D)),
        &[format!(
            "{t:e},{},{},{initial:e},{partial:e},{partial_se:e},{solved:e}",
            fmt_vec(z.x.as_slice()),
            fmt_vec(z.v.as_slice())
        )],
    )?;
    ctx.report.metric("partial_sum", partial);
    ctx.report.metric("partial_sum_stderr", partial_se);
    ctx.report.metric("solver_value", solved);
    ctx.report.metric("series_increment", partial - initial);
    ctx.report.metric("solver_increment", solved - initial);
    ctx.report.check(
        "partial_sum_matches_solver",
        (partial - solved).abs() <= tolerance,
        (partial - solved).abs(),
        tolerance,
        format!("orders 0..={} at t = {t:e}, max(3 stderr, {} relative)", p.max_order, p.relative_tolerance),
    );

    let maxwellian = DensityConfig::maxwellian(spec.beta).spec();
    let equilibrium = terms(&maxwellian, &z, t, 1..=p.max_order, p.samples, ctx.seed, "series-maxwellian")?;
    let worst = equilibrium
        .iter()
        .map(|s| if s.estimate.stderr > 0.0 { s.estimate.value.abs() / s.estimate.stderr } else { f64::INFINITY })
        .fold(0.0, f64::max);
    ctx.report.check(
        "equilibrium_terms_vanish",
        equilibrium.iter().all(|s| s.estimate.consistent_with(0.0, 3.0)),
        worst,
        3.0,
        "largest |term| / stderr for a Maxwellian",
    );
    let mut all_terms = series.clone();
    all_terms.extend(equilibrium);
    ctx.out.table("series_terms.csv", |buf| write_series_csv(&all_terms, buf))?;
    ctx.stage("equilibrium terms");

    // common random numbers across times: only the time scale changes between estimates
    let mut slope_rows = Vec::new();
    let mut slope_ok = true;
    let mut slopes = Vec::new();
    for s in 1..=p.max_order {
        let mut magnitudes = Vec::new();
        for &time in &p.slope_times {
            let term = &terms(&spec, &z, time, s..=s, p.slope_samples, ctx.seed, "slope")?[0];
            slope_rows.push(format!("{s},{time:e},{:e},{:e}", term.estimate.value, term.estimate.stderr));
            magnitudes.push(term.estimate.value.abs());
        }
        let slope = if magnitudes.iter().all(|&m| m > 0.0) { log_log_slope(&p.slope_times, &magnitudes).0 } else { f64::NAN };
        slope_ok &= (slope - s as f64).abs() <= p.slope_tolerance;
        slopes.push(slope);
    }
    ctx.out.rows("series_slope.csv", "s,t,estimate,stderr", &slope_rows)?;
    let worst_slope = slopes.iter().enumerate().map(|(k, sl)| (sl - (k + 1) as f64).abs()).fold(0.0, f64::max);
    ctx.report.metric("slopes", &slopes);
    ctx.report.check("term_slope_equals_order", slope_ok, worst_slope, p.slope_tolerance, "max |slope - s|");
    ctx.stage("slopes");

    let mut count_rows = Vec::new();
    let mut counts_ok = true;
    for n in 1..=p.max_tree_roots {
        for s in 0..=p.max_tree_added {
            let found = enumerate_trees(n, s)?.len() as u128;
            let expected = rising_factorial(n, s);
            counts_ok &= found == expected;
            count_rows.push(format!("{n},{s},{found},{expected}"));
        }
    }
    ctx.out.rows("tree_counts.csv", "n,s,count,expected", &count_rows)?;
    ctx.report.check("tree_counts", counts_ok, if counts_ok { 1.0 } else { 0.0 }, 1.0, "n(n+1)...(n+s-1) trees");
    Ok(())
}
