//! Config fragments and ensemble helpers shared by several scenarios.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::initial_data::{sample_factorized, DensitySpec, SamplingMethod, SpatialProfile};
use crate::observables::PhaseCellGrid;
use crate::seeding;
use crate::sim::{simulate, Configuration, EventLog};
use crate::solver::{lanford_time, LanfordBound, Quadrature, SolveOptions, SphereQuadrature, VelocityGrid};
use crate::vector::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityForm {
    Maxwellian,
    TwoBump,
}

/// Initial density `profile(x) g(v)`; `shift` and `width` only matter for the two-bump form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub form: DensityForm,
    pub beta: f64,
    pub shift: f64,
    pub width: f64,
    pub mu: Option<f64>,
    pub profile: SpatialProfile,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            form: DensityForm::TwoBump,
            beta: 1.0,
            shift: crate::initial_data::DEFAULT_TWO_BUMP_SHIFT,
            width: crate::initial_data::DEFAULT_TWO_BUMP_WIDTH,
            mu: None,
            profile: SpatialProfile::Uniform,
        }
    }
}

impl DensityConfig {
    pub fn maxwellian(beta: f64) -> Self {
        Self { form: DensityForm::Maxwellian, beta, ..Self::default() }
    }

    pub fn spec(&self) -> DensitySpec {
        let base = match self.form {
            DensityForm::Maxwellian => DensitySpec::maxwellian(self.beta),
            DensityForm::TwoBump => DensitySpec::two_bump(self.beta, self.shift, self.width),
        };
        let base = base.with_profile(self.profile);
        match self.mu {
            Some(mu) => base.with_mu(mu),
            None => base,
        }
    }

    pub fn check(&self, dim: usize) -> Result<(), ExperimentError> {
        self.spec().validate(dim).map_err(|e| ExperimentError::Config(format!("density: {e}")))
    }

    pub fn is_uniform(&self) -> bool {
        self.profile == SpatialProfile::Uniform
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseGridConfig {
    pub position_bins: usize,
    pub velocity_bins: usize,
    /// `None` means `4 / sqrt(beta)`.
    pub velocity_range: Option<f64>,
}

impl Default for PhaseGridConfig {
    fn default() -> Self {
        Self { position_bins: 8, velocity_bins: 16, velocity_range: None }
    }
}

impl PhaseGridConfig {
    pub fn new(position_bins: usize, velocity_bins: usize, velocity_range: Option<f64>) -> Self {
        Self { position_bins, velocity_bins, velocity_range }
    }

    pub fn grid<const D: usize>(&self, beta: f64) -> PhaseCellGrid<D> {
        PhaseCellGrid::new(self.position_bins, self.velocity_bins, self.range(beta))
    }

    pub fn range(&self, beta: f64) -> f64 {
        self.velocity_range.unwrap_or(4.0 / beta.sqrt())
    }

    pub fn check(&self, what: &str) -> Result<(), ExperimentError> {
        if self.position_bins == 0 || self.velocity_bins == 0 || self.velocity_range.is_some_and(|r| !(r > 0.0)) {
            return Err(ExperimentError::Config(format!("{what}: bins must be positive and the range > 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub nodes: usize,
    /// `None` means `5 / sqrt(beta)`.
    pub v_cut: Option<f64>,
    pub directions: usize,
    pub dt: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { nodes: 24, v_cut: None, directions: 16, dt: 0.01 }
    }
}

impl SolverConfig {
    pub fn grid<const D: usize>(&self, beta: f64) -> VelocityGrid<D> {
        VelocityGrid::new(self.nodes, self.v_cut.unwrap_or(5.0 / beta.sqrt()))
    }

    pub fn options<const D: usize>(&self, seed: u64) -> SolveOptions<D> {
        SolveOptions {
            sphere: SphereQuadrature::new(self.directions),
            quadrature: Quadrature::Tensor,
            reverse_horizon: None,
            keep_every: 1,
            seed,
        }
    }

    pub fn check(&self) -> Result<(), ExperimentError> {
        if self.nodes < 3 || self.directions < 2 || !(self.dt > 0.0) || self.v_cut.is_some_and(|v| !(v > 0.0)) {
            return Err(ExperimentError::Config(format!("solver: invalid settings {self:?}")));
        }
        Ok(())
    }
}

/// Diameter with `N eps^{d-1} = 1`.
pub fn scaled_diameter(particles: usize, dim: usize) -> f64 {
    (particles as f64).powf(-1.0 / (dim as f64 - 1.0))
}

pub fn check_scaling(particles: usize, eps: f64, dim: usize, warnings: &mut Vec<String>) {
    let product = particles as f64 * eps.powi(dim as i32 - 1);
    if !(0.5..=2.0).contains(&product) {
        warnings.push(format!("N eps^(d-1) = {product:.3} for N = {particles} is outside [0.5, 2]"));
    }
}

pub fn require(ok: bool, message: impl FnOnce() -> String) -> Result<(), ExperimentError> {
    if ok {
        Ok(())
    } else {
        Err(ExperimentError::Config(message()))
    }
}

pub fn lanford_bound(spec: &DensitySpec, dim: usize) -> Result<LanfordBound, ExperimentError> {
    Ok(lanford_time(dim, spec.beta, spec.mu(dim), 1.0)?)
}

/// `replicas` independent factorized configurations; replica `r` uses stream `(seed, stage, r)`.
pub fn factorized_ensemble<const D: usize>(
    spec: &DensitySpec,
    particles: usize,
    eps: f64,
    replicas: usize,
    seed: u64,
    stage: &str,
) -> Result<Vec<Configuration<D>>, ExperimentError> {
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeding::stream(seed, stage, r as u64);
            Ok(sample_factorized::<D, _>(spec, particles, eps, SamplingMethod::GlobalRejection, &mut rng)?)
        })
        .collect()
}

pub fn simulate_ensemble<const D: usize>(
    ensemble: &[Configuration<D>],
    t: f64,
) -> Result<Vec<(Configuration<D>, EventLog<D>)>, ExperimentError> {
    ensemble
        .par_iter()
        .map(|c| if t > 0.0 { Ok(simulate(c, t)?) } else { Ok((c.clone(), EventLog::default())) })
        .collect()
}

/// Mass of grid values `f` falling in each velocity cell of `cells`, with each node split
/// into `sub^D` equal sub-nodes assigned to the cell containing them.
pub fn grid_mass_per_velocity_cell<const D: usize>(
    grid: &VelocityGrid<D>,
    f: &[f64],
    cells: &PhaseCellGrid<D>,
    sub: usize,
) -> Vec<f64> {
    let h = grid.spacing();
    let parts = sub.pow(D as u32);
    let share = grid.weight() / parts as f64;
    let mut out = vec![0.0; cells.velocity_cells()];
    for (i, &fi) in f.iter().enumerate() {
        let node = grid.node(i);
        for k in 0..parts {
            let mut rest = k;
            let mut v = node;
            for a in 0..D {
                let m = rest % sub;
                rest /= sub;
                v[a] += h * ((m as f64 + 0.5) / sub as f64 - 0.5);
            }
            out[cells.velocity_cell_of(&v)] += fi * share;
        }
    }
    out
}

/// Velocity grid whose nodes are the centers of the velocity cells of `cells`.
pub fn coincident_grid<const D: usize>(cells: &PhaseCellGrid<D>) -> VelocityGrid<D> {
    VelocityGrid::new(cells.velocity_bins, cells.velocity_range)
}

/// Velocity-cell probabilities of the density's velocity factor.
pub fn velocity_cell_probabilities<const D: usize>(spec: &DensitySpec, cells: &PhaseCellGrid<D>) -> Vec<f64> {
    let reach = cells.velocity_range.max(6.0 / spec.beta.sqrt());
    let fine = VelocityGrid::<D>::new(if D <= 2 { 128 } else { 40 }, reach);
    let f = fine.project(|v| spec.velocity_density(v));
    let mass = grid_mass_per_velocity_cell(&fine, &f, cells, 1);
    let total: f64 = mass.iter().sum();
    mass.into_iter().map(|m| m / total).collect()
}

/// Torus distance between two position cells (zero for equal or adjacent cells).
pub fn position_cell_distance<const D: usize>(cells: &PhaseCellGrid<D>, a: usize, b: usize) -> f64 {
    let (la, _) = cells.position_bounds(a);
    let (lb, _) = cells.position_bounds(b);
    let p = cells.position_bins as f64;
    let mut sq = 0.0;
    for k in 0..D {
        let ia = (la[k] * p).round();
        let ib = (lb[k] * p).round();
        let gap = (ia - ib).abs();
        let gap = gap.min(p - gap);
        sq += ((gap - 1.0).max(0.0) / p).powi(2);
    }
    sq.sqrt()
}

/// Largest relative speed between velocities in two velocity cells; infinite for the
/// outer cells, which absorb the tails.
pub fn max_relative_speed<const D: usize>(cells: &PhaseCellGrid<D>, a: usize, b: usize) -> f64 {
    let (la, ha) = cells.velocity_bounds_open(a);
    let (lb, hb) = cells.velocity_bounds_open(b);
    let mut sq = 0.0;
    for k in 0..D {
        let span = (ha[k] - lb[k]).abs().max((hb[k] - la[k]).abs());
        sq += span * span;
    }
    sq.sqrt()
}

/// Cell pairs whose product cell cannot meet within `radius` under free flow over `horizon`
/// (in either direction), keeping the `limit` pairs of largest `weight(a) weight(b)`.
pub fn separated_pairs<const D: usize>(
    cells: &PhaseCellGrid<D>,
    radius: f64,
    horizon: f64,
    limit: usize,
    weight: &[f64],
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<usize> = (0..cells.cells()).filter(|&c| weight[c] > 0.0).collect();
    candidates.sort_by(|&a, &b| weight[b].total_cmp(&weight[a]).then(a.cmp(&b)));
    candidates.truncate(256);
    candidates.sort_unstable();
    let mut pairs = Vec::new();
    for (k, &a) in candidates.iter().enumerate() {
        for &b in &candidates[k + 1..] {
            let (pa, va) = cells.split(a);
            let (pb, vb) = cells.split(b);
            let drift = if horizon > 0.0 { horizon * max_relative_speed(cells, va, vb) } else { 0.0 };
            let gap = position_cell_distance(cells, pa, pb) - drift;
            if gap > radius {
                pairs.push((a, b));
            }
        }
    }
    pairs.sort_by(|p, q| (weight[q.0] * weight[q.1]).total_cmp(&(weight[p.0] * weight[p.1])).then(p.cmp(q)));
    pairs.truncate(limit);
    pairs.sort_unstable();
    pairs
}

/// Expected phase-cell probabilities of `spec`, position factor from the profile at cell centers.
pub fn phase_cell_weights<const D: usize>(spec: &DensitySpec, cells: &PhaseCellGrid<D>) -> Vec<f64> {
    let vel = velocity_cell_probabilities(spec, cells);
    let pv = cells.position_volume();
    (0..cells.cells())
        .map(|c| {
            let (p, v) = cells.split(c);
            let (lo, hi) = cells.position_bounds(p);
            let center: Vector<D> = (lo + hi) * 0.5;
            spec.spatial_density(&center) * pv * vel[v]
        })
        .collect()
}

pub fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|c| format!("{c:e}")).collect::<Vec<_>>().join(",")
}

pub fn axis_names(prefix: &str, dim: usize) -> String {
    (1..=dim).map(|a| format!("{prefix}{a}")).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_mass_is_conserved_and_lands_in_matching_cells() {
        let grid = VelocityGrid::<2>::new(16, 4.0);
        let cells = PhaseCellGrid::<2>::new(1, 8, 4.0);
        let f = grid.maxwellian(1.0);
        let mass = grid_mass_per_velocity_cell(&grid, &f, &cells, 3);
        let total: f64 = f.iter().sum::<f64>() * grid.weight();
        assert!((mass.iter().sum::<f64>() - total).abs() < 1e-12);
        // node cells nest inside the coarser velocity cells, so sub-sampling changes nothing
        let plain = grid_mass_per_velocity_cell(&grid, &f, &cells, 1);
        for (a, b) in mass.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
        let exact = cells.maxwellian_cell_probabilities(1.0, &Vector::zero());
        for (a, b) in mass.iter().zip(&exact) {
            assert!((a - b).abs() < 5e-3, "{a} {b}");
        }
    }

    #[test]
    fn separated_pairs_are_far_apart() {
        let cells = PhaseCellGrid::<2>::new(8, 4, 3.0);
        let spec = DensitySpec::two_bump(1.0, 1.0, 0.6);
        let w = phase_cell_weights(&spec, &cells);
        let pairs = separated_pairs(&cells, 0.08, 0.05, 100, &w);
        assert!(!pairs.is_empty() && pairs.len() <= 100);
        for &(a, b) in &pairs {
            let (pa, _) = cells.split(a);
            let (pb, _) = cells.split(b);
            assert!(position_cell_distance(&cells, pa, pb) > 0.08);
        }
        assert_eq!(position_cell_distance(&cells, 0, 7), 0.0);
        assert!((position_cell_distance(&cells, 0, 2) - 0.125).abs() < 1e-12);
    }
}
