//! Explicit second-order time stepping of the spatially uniform equation, forward or reversed.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use super::collision::{collision_operator, loss_rate, Quadrature, SphereQuadrature};
use super::grid::{Moments, VelocityGrid};
use super::lanford::lanford_time;
use crate::seeding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("density became negative at t = {t}: f = {value} at node {node}")]
    NegativeDensity { t: f64, node: usize, value: f64 },
    #[error("time step {dt} violates the stability bound (dt * max loss rate = {product}, limit 0.5)")]
    StepTooLarge { dt: f64, product: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeDirection {
    Forward,
    Reverse,
}

impl TimeDirection {
    fn sign(self) -> f64 {
        match self {
            TimeDirection::Forward => 1.0,
            TimeDirection::Reverse => -1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HomogeneousState<const D: usize> {
    pub grid: VelocityGrid<D>,
    pub f: Vec<f64>,
    pub t: f64,
}

impl<const D: usize> HomogeneousState<D> {
    pub fn new(grid: VelocityGrid<D>, f: Vec<f64>) -> Self {
        assert_eq!(f.len(), grid.len());
        Self { grid, f, t: 0.0 }
    }

    pub fn from_density(grid: VelocityGrid<D>, density: impl Fn(&crate::Vector<D>) -> f64) -> Self {
        let f = grid.project(density);
        Self::new(grid, f)
    }

    pub fn moments(&self) -> Moments<D> {
        self.grid.moments(&self.f)
    }

    /// `-∫ f log f`, with `0 log 0 = 0`; negative values are skipped.
    pub fn entropy(&self) -> f64 {
        let w = self.grid.weight();
        -self.f.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln() * w).sum::<f64>()
    }

    /// `∫ f log(f / M)` against a reference density on the same grid.
    pub fn relative_entropy_to(&self, reference: &[f64]) -> f64 {
        let w = self.grid.weight();
        self.f
            .iter()
            .zip(reference)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &m)| x * (x / m).ln() * w)
            .sum()
    }

    /// Inverse temperature of the moment-matched Maxwellian.
    pub fn matched_beta(&self) -> f64 {
        let m = self.moments();
        let mean = m.momentum * (1.0 / m.mass);
        D as f64 / (m.energy / m.mass - mean.norm_sq())
    }

    /// Largest `mu` with `f <= exp(-mu - beta |v|^2 / 2)` on the nodes.
    pub fn envelope_mu(&self, beta: f64) -> f64 {
        let sup = (0..self.grid.len())
            .map(|i| self.f[i] * (0.5 * beta * self.grid.node(i).norm_sq()).exp())
            .fold(0.0f64, f64::max);
        -sup.ln()
    }

    /// Writes `v_1, ..., v_d, f` rows.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let header: Vec<String> = (1..=D).map(|a| format!("v{a}")).chain(["f".to_string()]).collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, fi) in self.f.iter().enumerate() {
            let v = self.grid.node(i);
            let cols: Vec<String> = v.as_slice().iter().map(|c| format!("{c:e}")).collect();
            writeln!(out, "{},{:e}", cols.join(","), fi)?;
        }
        Ok(())
    }
}

/// Per-step diagnostics. `production` is the grid quadrature of `-∫ Q log f`.
#[derive(Clone, Debug, Serialize)]
pub struct TracePoint {
    pub t: f64,
    pub mass: f64,
    pub momentum: Vec<f64>,
    pub energy: f64,
    pub entropy: f64,
    pub relative_entropy: f64,
    pub production: f64,
}

impl TracePoint {
    pub fn csv_header(dim: usize) -> String {
        let mom: Vec<String> = (1..=dim).map(|a| format!("p{a}")).collect();
        format!("t,mass,{},energy,S,H,D", mom.join(","))
    }

    pub fn csv_row(&self) -> String {
        let mom: Vec<String> = self.momentum.iter().map(|c| format!("{c:e}")).collect();
        format!(
            "{:e},{:e},{},{:e},{:e},{:e},{:e}",
            self.t,
            self.mass,
            mom.join(","),
            self.energy,
            self.entropy,
            self.relative_entropy,
            self.production
        )
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions<const D: usize> {
    pub sphere: SphereQuadrature<D>,
    pub quadrature: Quadrature,
    /// Longest admissible reverse run. `None` uses a tenth of the Lanford time of the initial
    /// data with unit margin.
    pub reverse_horizon: Option<f64>,
    /// Keep every k-th state (the final one is always kept).
    pub keep_every: usize,
    /// Seed for the Monte Carlo quadrature.
    pub seed: u64,
}

impl<const D: usize> Default for SolveOptions<D> {
    fn default() -> Self {
        Self {
            sphere: SphereQuadrature::default_for_dim(),
            quadrature: Quadrature::Tensor,
            reverse_horizon: None,
            keep_every: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory<const D: usize> {
    pub states: Vec<HomogeneousState<D>>,
    pub trace: Vec<TracePoint>,
    pub direction: TimeDirection,
    /// Set when a reverse run hit a negative value and stopped before `t_final`.
    pub terminated_early: Option<SolverError>,
}

impl<const D: usize> Trajectory<D> {
    pub fn last(&self) -> &HomogeneousState<D> {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn write_trace_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", TracePoint::csv_header(D))?;
        for p in &self.trace {
            writeln!(out, "{}", p.csv_row())?;
        }
        Ok(())
    }
}

fn first_negative(f: &[f64]) -> Option<(usize, f64)> {
    f.iter().enumerate().find(|(_, &x)| x < 0.0 || !x.is_finite()).map(|(i, &x)| (i, x))
}

/// Negative values this small relative to the peak are roundoff from the conservation
/// correction in the far tail; they are set to zero.
const ROUNDOFF_FLOOR: f64 = 1e-12;

fn clamp_roundoff(f: &mut [f64]) {
    let floor = -ROUNDOFF_FLOOR * f.iter().copied().fold(0.0, f64::max);
    for x in f.iter_mut() {
        if *x < 0.0 && *x >= floor {
            *x = 0.0;
        }
    }
}

pub fn default_reverse_horizon<const D: usize>(f0: &HomogeneousState<D>) -> f64 {
    let beta = f0.matched_beta();
    let mu = f0.envelope_mu(beta);
    lanford_time(D, beta, mu, 1.0).map(|b| 0.1 * b.t_star).unwrap_or(0.0)
}

/// Integrates `∂_t f = ±Q(f,f)` with Heun's method from `f0.t` to `f0.t + t_final`.
///
/// The step is shrunk to `t_final / ceil(t_final / dt)` so the run ends exactly at `t_final`.
pub fn solve_homogeneous<const D: usize>(
    f0: &HomogeneousState<D>,
    t_final: f64,
    dt: f64,
    direction: TimeDirection,
    options: &SolveOptions<D>,
) -> Result<Trajectory<D>, SolverError> {
    if !(t_final >= 0.0 && dt > 0.0 && t_final.is_finite()) {
        return Err(SolverError::InvalidParameters(format!("t_final = {t_final}, dt = {dt}")));
    }
    if let Some((node, value)) = first_negative(&f0.f) {
        return Err(SolverError::NegativeDensity { t: f0.t, node, value });
    }
    if direction == TimeDirection::Reverse {
        let horizon = options.reverse_horizon.unwrap_or_else(|| default_reverse_horizon(f0));
        if t_final > horizon * (1.0 + 1e-12) {
            return Err(SolverError::InvalidParameters(format!(
                "reverse run to {t_final} exceeds the configured horizon {horizon}"
            )));
        }
    }
    let steps = ((t_final / dt) - 1e-9).ceil().max(0.0) as usize;
    let dt = if steps > 0 { t_final / steps as f64 } else { dt };
    let peak_loss = loss_rate(&f0.grid, &f0.f, &options.sphere).into_iter().fold(0.0, f64::max);
    if dt * peak_loss >= 0.5 {
        return Err(SolverError::StepTooLarge { dt, product: dt * peak_loss });
    }

    let grid = f0.grid;
    let reference = grid.matched_maxwellian(&f0.f);
    let sign = direction.sign();
    let mut rng = seeding::stream(options.seed, "collision-quadrature", 0);
    let mut q_of = |f: &[f64]| collision_operator(&grid, f, &options.sphere, options.quadrature, &mut rng);

    let trace_point = |state: &HomogeneousState<D>, q: &[f64]| {
        let m = state.moments();
        let w = grid.weight();
        let production = -state
            .f
            .iter()
            .zip(q)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &qi)| qi * x.ln() * w)
            .sum::<f64>();
        TracePoint {
            t: state.t,
            mass: m.mass,
            momentum: m.momentum.as_slice().to_vec(),
            energy: m.energy,
            entropy: state.entropy(),
            relative_entropy: state.relative_entropy_to(&reference),
            production,
        }
    };

    let mut state = f0.clone();
    let mut states = vec![state.clone()];
    let mut trace = Vec::with_capacity(steps + 1);
    let mut terminated_early = None;
    let mut q = q_of(&state.f);
    trace.push(trace_point(&state, &q));
    for step in 1..=steps {
        let predictor: Vec<f64> = state.f.iter().zip(&q).map(|(f, k)| f + sign * dt * k).collect();
        let q_pred = q_of(&predictor);
        let mut next: Vec<f64> = state
            .f
            .iter()
            .zip(q.iter().zip(&q_pred))
            .map(|(f, (k1, k2))| f + 0.5 * sign * dt * (k1 + k2))
            .collect();
        clamp_roundoff(&mut next);
        let t_next = f0.t + step as f64 * dt;
        if let Some((node, value)) = first_negative(&next) {
            let err = SolverError::NegativeDensity { t: t_next, node, value };
            match direction {
                TimeDirection::Forward => return Err(err),
                TimeDirection::Reverse => {
                    log::warn!("reverse solve stopped early: {err}");
                    terminated_early = Some(err);
                    break;
                }
            }
        }
        state = HomogeneousState { grid, f: next, t: t_next };
        q = q_of(&state.f);
        trace.push(trace_point(&state, &q));
        if step % options.keep_every.max(1) == 0 || step == steps {
            states.push(state.clone());
        }
    }
    if terminated_early.is_some() && states.last().map(|s| s.t) != Some(state.t) {
        states.push(state);
    }
    Ok(Trajectory { states, trace, direction, terminated_early })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bump(grid: VelocityGrid<2>) -> HomogeneousState<2> {
        HomogeneousState::from_density(grid, |v| {
            let s = 1.0;
            let w2 = 0.36;
            let norm = 0.5 / (2.0 * std::f64::consts::PI * w2);
            norm * ((-((v[0] - s).powi(2) + v[1] * v[1]) / (2.0 * w2)).exp()
                + (-((v[0] + s).powi(2) + v[1] * v[1]) / (2.0 * w2)).exp())
        })
    }

    fn fast_options() -> SolveOptions<2> {
        SolveOptions {
            sphere: SphereQuadrature::new(16),
            ..SolveOptions::default()
        }
    }

    #[test]
    fn conserves_and_dissipates() {
        let grid = VelocityGrid::<2>::new(16, 5.0);
        let f0 = two_bump(grid);
        let traj = solve_homogeneous(&f0, 0.2, 0.02, TimeDirection::Forward, &fast_options()).unwrap();
        let first = &traj.trace[0];
        for p in &traj.trace {
            assert!((p.mass - first.mass).abs() < 1e-10 * first.mass);
            assert!((p.energy - first.energy).abs() < 1e-10 * first.energy);
        }
        for w in traj.trace.windows(2) {
            assert!(w[1].relative_entropy <= w[0].relative_entropy + 1e-6);
            assert!(w[1].entropy >= w[0].entropy - 1e-6);
        }
        assert!(first.production > 0.0);
    }

    #[test]
    fn reverse_horizon_enforced() {
        let grid = VelocityGrid::<2>::new(16, 5.0);
        let f0 = HomogeneousState::new(grid, grid.maxwellian(1.0));
        let opts = SolveOptions { reverse_horizon: Some(0.01), ..fast_options() };
        let err = solve_homogeneous(&f0, 0.1, 0.01, TimeDirection::Reverse, &opts).unwrap_err();
        assert!(matches!(err, SolverError::InvalidParameters(_)));
    }

    #[test]
    fn step_bound_enforced() {
        let grid = VelocityGrid::<2>::new(16, 5.0);
        let f0 = HomogeneousState::new(grid, grid.maxwellian(1.0));
        let err = solve_homogeneous(&f0, 1.0, 1.0, TimeDirection::Forward, &fast_options()).unwrap_err();
        assert!(matches!(err, SolverError::StepTooLarge { .. }));
    }

    #[test]
    fn roundoff_negatives_are_clamped() {
        let mut f = vec![1.0, -1e-19, -1e-3, 0.5];
        clamp_roundoff(&mut f);
        assert_eq!(f, vec![1.0, 0.0, -1e-3, 0.5]);
    }
}
