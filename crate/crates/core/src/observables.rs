//! Ensemble estimators: one- and two-particle marginals, the chaos defect, entropies and
//! entropy production.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erf;
use thiserror::Error;

use crate::draw::unit_vector;
use crate::sim::Configuration;
use crate::solver::grid::{Interpolant, VelocityGrid};
use crate::stats::Estimate;
use crate::torus::ParticleState;
use crate::vector::{sphere_area, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservableError {
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("replica {replica} has {particles} particles, fewer than the marginal order {order}")]
    TooFewParticles { replica: usize, particles: usize, order: usize },
    #[error("negative or non-finite density {value} in cell {cell}")]
    NegativeDensity { cell: usize, value: f64 },
    #[error("{0}")]
    InvalidOptions(String),
    #[error("no usable samples: all {0} draws hit a vanishing density")]
    ZeroDensityEncountered(usize),
}

/// Replicas fold in fixed-size chunks so sums do not depend on the thread count.
const CHUNK: usize = 64;

impl<const D: usize> AsRef<[ParticleState<D>]> for Configuration<D> {
    fn as_ref(&self) -> &[ParticleState<D>] {
        &self.particles
    }
}

/// Product of a uniform position grid on the torus and a velocity grid on `[-R, R]^d`.
///
/// Velocities beyond `R` are counted in the outermost bin along that axis, so the bins
/// partition all of phase space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhaseCellGrid<const D: usize> {
    pub position_bins: usize,
    pub velocity_bins: usize,
    pub velocity_range: f64,
}

impl<const D: usize> PhaseCellGrid<D> {
    pub fn new(position_bins: usize, velocity_bins: usize, velocity_range: f64) -> Self {
        assert!(position_bins >= 1 && velocity_bins >= 1 && velocity_range > 0.0);
        Self { position_bins, velocity_bins, velocity_range }
    }

    /// 8 position bins and 16 velocity bins per axis over `[-4/sqrt(beta), 4/sqrt(beta)]`.
    pub fn default_for(beta: f64) -> Self {
        Self::new(8, 16, 4.0 / beta.sqrt())
    }

    pub fn position_cells(&self) -> usize {
        self.position_bins.pow(D as u32)
    }

    pub fn velocity_cells(&self) -> usize {
        self.velocity_bins.pow(D as u32)
    }

    pub fn cells(&self) -> usize {
        self.position_cells() * self.velocity_cells()
    }

    pub fn position_volume(&self) -> f64 {
        (1.0 / self.position_bins as f64).powi(D as i32)
    }

    pub fn velocity_volume(&self) -> f64 {
        (2.0 * self.velocity_range / self.velocity_bins as f64).powi(D as i32)
    }

    pub fn cell_volume(&self) -> f64 {
        self.position_volume() * self.velocity_volume()
    }

    fn axis_bin(&self, v: f64) -> usize {
        let s = (v + self.velocity_range) / (2.0 * self.velocity_range) * self.velocity_bins as f64;
        if s <= 0.0 {
            0
        } else {
            (s as usize).min(self.velocity_bins - 1)
        }
    }

    pub fn velocity_cell_of(&self, v: &Vector<D>) -> usize {
        let mut idx = 0;
        for a in 0..D {
            idx = idx * self.velocity_bins + self.axis_bin(v[a]);
        }
        idx
    }

    pub fn position_cell_of(&self, x: &Vector<D>) -> usize {
        let mut idx = 0;
        for a in 0..D {
            let k = ((x[a] * self.position_bins as f64) as usize).min(self.position_bins - 1);
            idx = idx * self.position_bins + k;
        }
        idx
    }

    pub fn cell_of(&self, z: &ParticleState<D>) -> usize {
        self.position_cell_of(&z.x) * self.velocity_cells() + self.velocity_cell_of(&z.v)
    }

    pub fn compose(&self, position_cell: usize, velocity_cell: usize) -> usize {
        position_cell * self.velocity_cells() + velocity_cell
    }

    /// `(position cell, velocity cell)`.
    pub fn split(&self, cell: usize) -> (usize, usize) {
        (cell / self.velocity_cells(), cell % self.velocity_cells())
    }

    fn unflatten(mut idx: usize, bins: usize) -> [usize; D] {
        let mut m = [0; D];
        for a in (0..D).rev() {
            m[a] = idx % bins;
            idx /= bins;
        }
        m
    }

    /// Lower and upper corner of a position cell.
    pub fn position_bounds(&self, position_cell: usize) -> (Vector<D>, Vector<D>) {
        let m = Self::unflatten(position_cell, self.position_bins);
        let h = 1.0 / self.position_bins as f64;
        let lo = Vector(std::array::from_fn(|a| m[a] as f64 * h));
        let hi = Vector(std::array::from_fn(|a| (m[a] + 1) as f64 * h));
        (lo, hi)
    }

    /// Nominal corners of a velocity cell; the outer bins also absorb the tails.
    pub fn velocity_bounds(&self, velocity_cell: usize) -> (Vector<D>, Vector<D>) {
        let m = Self::unflatten(velocity_cell, self.velocity_bins);
        let h = 2.0 * self.velocity_range / self.velocity_bins as f64;
        let lo = Vector(std::array::from_fn(|a| -self.velocity_range + m[a] as f64 * h));
        let hi = Vector(std::array::from_fn(|a| -self.velocity_range + (m[a] + 1) as f64 * h));
        (lo, hi)
    }

    /// Velocity-cell bounds with the outer bins extended to infinity.
    pub fn velocity_bounds_open(&self, velocity_cell: usize) -> (Vector<D>, Vector<D>) {
        let (mut lo, mut hi) = self.velocity_bounds(velocity_cell);
        for a in 0..D {
            if lo[a] <= -self.velocity_range + 1e-12 {
                lo[a] = f64::NEG_INFINITY;
            }
            if hi[a] >= self.velocity_range - 1e-12 {
                hi[a] = f64::INFINITY;
            }
        }
        (lo, hi)
    }

    pub fn center(&self, cell: usize) -> (Vector<D>, Vector<D>) {
        let (p, v) = self.split(cell);
        let (xl, xh) = self.position_bounds(p);
        let (vl, vh) = self.velocity_bounds(v);
        ((xl + xh) * 0.5, (vl + vh) * 0.5)
    }

    /// Probability of each velocity cell under a Maxwellian with mean `mean`.
    pub fn maxwellian_cell_probabilities(&self, beta: f64, mean: &Vector<D>) -> Vec<f64> {
        let sigma = (1.0 / beta).sqrt();
        let cdf = |x: f64| 0.5 * (1.0 + erf(x / (sigma * std::f64::consts::SQRT_2)));
        (0..self.velocity_cells())
            .map(|c| {
                let (lo, hi) = self.velocity_bounds_open(c);
                (0..D).map(|a| cdf(hi[a] - mean[a]) - cdf(lo[a] - mean[a])).product()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Normalization {
    /// Divide counts by `N` (order 1) or `N(N-1)` (order 2): the marginals of a canonical state.
    PerParticle,
    /// Divide by `mu^j`: the rescaled correlation functions of a grand-canonical state.
    Activity(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarginalOptions {
    /// Count every particle (or ordered pair) rather than only the first one.
    pub symmetrized: bool,
    pub normalization: Normalization,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        Self { symmetrized: true, normalization: Normalization::PerParticle }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MarginalEstimate<const D: usize> {
    pub order: usize,
    pub grid: PhaseCellGrid<D>,
    /// Densities per cell (order 1) or per ordered cell pair, row-major (order 2).
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub replicas: usize,
    pub options: MarginalOptions,
}

impl<const D: usize> MarginalEstimate<D> {
    pub fn value(&self, cell: usize) -> Estimate {
        Estimate { value: self.values[cell], stderr: self.stderr[cell], samples: self.replicas }
    }

    pub fn pair_value(&self, a: usize, b: usize) -> Estimate {
        self.value(a * self.grid.cells() + b)
    }

    /// `Σ value * volume`.
    pub fn total_mass(&self) -> f64 {
        let vol = self.grid.cell_volume().powi(self.order as i32);
        self.values.iter().sum::<f64>() * vol
    }

    /// Spatially integrated velocity density with its standard error, assuming independent
    /// cells (conservative for positively correlated counts only).
    pub fn velocity_marginal(&self) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(self.order, 1);
        let vc = self.grid.velocity_cells();
        let pv = self.grid.position_volume();
        let mut values = vec![0.0; vc];
        let mut var = vec![0.0; vc];
        for cell in 0..self.grid.cells() {
            let (_, v) = self.grid.split(cell);
            values[v] += self.values[cell] * pv;
            var[v] += (self.stderr[cell] * pv).powi(2);
        }
        (values, var.into_iter().map(f64::sqrt).collect())
    }

    /// Order 1: `cell,x1..xd,v1..vd,value,stderr` at cell centers. Order 2: nonzero pairs as
    /// `cell_a,cell_b,value,stderr`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        if self.order == 1 {
            let xs: Vec<String> = (1..=D).map(|a| format!("x{a}")).collect();
            let vs: Vec<String> = (1..=D).map(|a| format!("v{a}")).collect();
            writeln!(out, "cell,{},{},value,stderr", xs.join(","), vs.join(","))?;
            for cell in 0..self.values.len() {
                let (x, v) = self.grid.center(cell);
                let fmt = |u: &Vector<D>| u.as_slice().iter().map(|c| format!("{c:e}")).collect::<Vec<_>>().join(",");
                writeln!(out, "{cell},{},{},{:e},{:e}", fmt(&x), fmt(&v), self.values[cell], self.stderr[cell])?;
            }
        } else {
            writeln!(out, "cell_a,cell_b,value,stderr")?;
            let cells = self.grid.cells();
            for (k, (&val, &se)) in self.values.iter().zip(&self.stderr).enumerate() {
                if val != 0.0 {
                    writeln!(out, "{},{},{val:e},{se:e}", k / cells, k % cells)?;
                }
            }
        }
        Ok(())
    }
}

/// Sorted `(cell, count)` occupation list of one replica.
fn occupation<const D: usize>(grid: &PhaseCellGrid<D>, particles: &[ParticleState<D>]) -> Vec<(usize, usize)> {
    let mut cells: Vec<usize> = particles.iter().map(|z| grid.cell_of(z)).collect();
    cells.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for c in cells {
        match out.last_mut() {
            Some((last, k)) if *last == c => *k += 1,
            _ => out.push((c, 1)),
        }
    }
    out
}

fn count_in(occ: &[(usize, usize)], cell: usize) -> usize {
    occ.binary_search_by_key(&cell, |&(c, _)| c).map(|i| occ[i].1).unwrap_or(0)
}

fn normalizers(normalization: Normalization, n: usize) -> (f64, f64) {
    match normalization {
        Normalization::PerParticle => (n as f64, (n * n.saturating_sub(1)) as f64),
        Normalization::Activity(mu) => (mu, mu * mu),
    }
}

fn check_ensemble<const D: usize, C: AsRef<[ParticleState<D>]>>(
    ensemble: &[C],
    order: usize,
    options: &MarginalOptions,
) -> Result<(), ObservableError> {
    if ensemble.is_empty() {
        return Err(ObservableError::EmptyEnsemble);
    }
    if let Normalization::Activity(mu) = options.normalization {
        if !options.symmetrized || !(mu > 0.0) {
            return Err(ObservableError::InvalidOptions(
                "activity normalization needs symmetrized counting and mu > 0".into(),
            ));
        }
        return Ok(());
    }
    for (replica, c) in ensemble.iter().enumerate() {
        if c.as_ref().len() < order {
            return Err(ObservableError::TooFewParticles { replica, particles: c.as_ref().len(), order });
        }
    }
    Ok(())
}

/// Adds per-replica sparse contributions into dense sums of `x` and `x^2`.
fn fold_dense<C: Sync>(
    ensemble: &[C],
    len: usize,
    contributions: impl Fn(&C) -> Vec<(usize, f64)> + Sync,
) -> (Vec<f64>, Vec<f64>) {
    let partials: Vec<(Vec<f64>, Vec<f64>)> = ensemble
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = vec![0.0; len];
            let mut q = vec![0.0; len];
            for c in chunk {
                for (k, x) in contributions(c) {
                    s[k] += x;
                    q[k] += x * x;
                }
            }
            (s, q)
        })
        .collect();
    let mut s = vec![0.0; len];
    let mut q = vec![0.0; len];
    for (ps, pq) in partials {
        for k in 0..len {
            s[k] += ps[k];
            q[k] += pq[k];
        }
    }
    (s, q)
}

const MAX_PAIR_CELLS: usize = 1 << 24;

/// Histogram estimate of the order-1 or order-2 marginal across replicas.
///
/// Each replica contributes its fraction of particles (or ordered pairs) per cell; the
/// standard error is that of the replica mean.
pub fn estimate_marginal<const D: usize, C: AsRef<[ParticleState<D>]> + Sync>(
    ensemble: &[C],
    order: usize,
    grid: &PhaseCellGrid<D>,
    options: MarginalOptions,
) -> Result<MarginalEstimate<D>, ObservableError> {
    if order != 1 && order != 2 {
        return Err(ObservableError::InvalidOptions(format!("order {order} not supported")));
    }
    check_ensemble::<D, C>(ensemble, order, &options)?;
    let cells = grid.cells();
    let len = if order == 1 {
        cells
    } else {
        if cells * cells > MAX_PAIR_CELLS {
            return Err(ObservableError::InvalidOptions(format!(
                "{cells} cells is too many for a dense pair histogram"
            )));
        }
        cells * cells
    };
    let contributions = |c: &C| -> Vec<(usize, f64)> {
        let particles = c.as_ref();
        let (n1, n2) = normalizers(options.normalization, particles.len());
        match (order, options.symmetrized) {
            (1, true) => occupation(grid, particles).into_iter().map(|(k, m)| (k, m as f64 / n1)).collect(),
            (1, false) => vec![(grid.cell_of(&particles[0]), 1.0)],
            (_, true) => {
                let occ = occupation(grid, particles);
                let mut out = Vec::with_capacity(occ.len() * occ.len());
                for &(a, ka) in &occ {
                    for &(b, kb) in &occ {
                        let pairs = ka * kb - if a == b { ka } else { 0 };
                        if pairs > 0 {
                            out.push((a * cells + b, pairs as f64 / n2));
                        }
                    }
                }
                out
            }
            (_, false) => vec![(grid.cell_of(&particles[0]) * cells + grid.cell_of(&particles[1]), 1.0)],
        }
    };
    let (s, q) = fold_dense(ensemble, len, contributions);
    let r = ensemble.len() as f64;
    let vol = grid.cell_volume().powi(order as i32);
    let mut values = Vec::with_capacity(len);
    let mut stderr = Vec::with_capacity(len);
    for k in 0..len {
        let mean = s[k] / r;
        let var = if r > 1.0 { ((q[k] - r * mean * mean) / (r - 1.0)).max(0.0) } else { 0.0 };
        values.push(mean / vol);
        stderr.push((var / r).sqrt() / vol);
    }
    Ok(MarginalEstimate { order, grid: *grid, values, stderr, replicas: ensemble.len(), options })
}

/// Rescaled correlation function of order 1 or 2 for a grand-canonical ensemble.
pub fn estimate_correlation<const D: usize, C: AsRef<[ParticleState<D>]> + Sync>(
    ensemble: &[C],
    order: usize,
    grid: &PhaseCellGrid<D>,
    activity: f64,
) -> Result<MarginalEstimate<D>, ObservableError> {
    estimate_marginal(
        ensemble,
        order,
        grid,
        MarginalOptions { symmetrized: true, normalization: Normalization::Activity(activity) },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct PairDefect {
    pub cell_a: usize,
    pub cell_b: usize,
    pub pair: Estimate,
    pub first: Estimate,
    pub second: Estimate,
    /// `f2(a, b) - f1(a) f1(b)`.
    pub defect: Estimate,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChaosDefect {
    pub pairs: Vec<PairDefect>,
    /// Largest `|defect|` over the pairs, with the standard error of that pair.
    pub max_abs: Estimate,
}

impl ChaosDefect {
    /// Fraction of pairs whose defect is within `k` standard errors of zero.
    pub fn fraction_consistent_with_zero(&self, k: f64) -> f64 {
        if self.pairs.is_empty() {
            return 1.0;
        }
        let ok = self.pairs.iter().filter(|p| p.defect.consistent_with(0.0, k)).count();
        ok as f64 / self.pairs.len() as f64
    }

    pub fn csv_header() -> &'static str {
        "cell_a,cell_b,f2,f2_stderr,f1_a,f1_b,defect,defect_stderr"
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::csv_header())?;
        for p in &self.pairs {
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
                p.cell_a, p.cell_b, p.pair.value, p.pair.stderr, p.first.value, p.second.value, p.defect.value, p.defect.stderr
            )?;
        }
        Ok(())
    }
}

/// Per-pair replica sums of `(y, a, b)` and their products, for the delta method.
#[derive(Clone, Copy, Default)]
struct Moments3 {
    s: [f64; 3],
    q: [[f64; 3]; 3],
}

impl Moments3 {
    fn push(&mut self, x: [f64; 3]) {
        for i in 0..3 {
            self.s[i] += x[i];
            for j in 0..3 {
                self.q[i][j] += x[i] * x[j];
            }
        }
    }

    fn merge(&mut self, other: &Self) {
        for i in 0..3 {
            self.s[i] += other.s[i];
            for j in 0..3 {
                self.q[i][j] += other.q[i][j];
            }
        }
    }
}

/// `f2 - f1 ⊗ f1` at fixed pairs of phase cells, with delta-method standard errors.
pub fn chaos_defect<const D: usize, C: AsRef<[ParticleState<D>]> + Sync>(
    ensemble: &[C],
    grid: &PhaseCellGrid<D>,
    cell_pairs: &[(usize, usize)],
    options: MarginalOptions,
) -> Result<ChaosDefect, ObservableError> {
    check_ensemble::<D, C>(ensemble, 2, &options)?;
    let partials: Vec<Vec<Moments3>> = ensemble
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![Moments3::default(); cell_pairs.len()];
            for c in chunk {
                let particles = c.as_ref();
                let (n1, n2) = normalizers(options.normalization, particles.len());
                if options.symmetrized {
                    let occ = occupation(grid, particles);
                    for (m, &(a, b)) in acc.iter_mut().zip(cell_pairs) {
                        let ka = count_in(&occ, a);
                        let kb = count_in(&occ, b);
                        let pairs = ka * kb - if a == b { ka } else { 0 };
                        let y = if n2 > 0.0 { pairs as f64 / n2 } else { 0.0 };
                        let (xa, xb) = if n1 > 0.0 { (ka as f64 / n1, kb as f64 / n1) } else { (0.0, 0.0) };
                        m.push([y, xa, xb]);
                    }
                } else {
                    let c0 = grid.cell_of(&particles[0]);
                    let c1 = grid.cell_of(&particles[1]);
                    for (m, &(a, b)) in acc.iter_mut().zip(cell_pairs) {
                        let ind = |t: bool| if t { 1.0 } else { 0.0 };
                        m.push([ind(c0 == a && c1 == b), ind(c0 == a), ind(c0 == b)]);
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![Moments3::default(); cell_pairs.len()];
    for p in &partials {
        for (t, m) in total.iter_mut().zip(p) {
            t.merge(m);
        }
    }
    let r = ensemble.len() as f64;
    let vol = grid.cell_volume();
    let mut pairs = Vec::with_capacity(cell_pairs.len());
    for (m, &(a, b)) in total.iter().zip(cell_pairs) {
        let mean = m.s.map(|x| x / r);
        let cov = |i: usize, j: usize| {
            if r > 1.0 {
                (m.q[i][j] - r * mean[i] * mean[j]) / (r - 1.0)
            } else {
                0.0
            }
        };
        let grad = [1.0, -mean[2], -mean[1]];
        let mut var = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                var += grad[i] * grad[j] * cov(i, j);
            }
        }
        let est = |value: f64, variance: f64, scale: f64| Estimate {
            value: value / scale,
            stderr: (variance.max(0.0) / r).sqrt() / scale,
            samples: ensemble.len(),
        };
        pairs.push(PairDefect {
            cell_a: a,
            cell_b: b,
            pair: est(mean[0], cov(0, 0), vol * vol),
            first: est(mean[1], cov(1, 1), vol),
            second: est(mean[2], cov(2, 2), vol),
            defect: est(mean[0] - mean[1] * mean[2], var, vol * vol),
        });
    }
    let max_abs = pairs
        .iter()
        .max_by(|p, q| p.defect.value.abs().total_cmp(&q.defect.value.abs()))
        .map(|p| Estimate { value: p.defect.value.abs(), ..p.defect })
        .unwrap_or(Estimate::exact(0.0));
    Ok(ChaosDefect { pairs, max_abs })
}

/// `Σ f log(f / M) * volume`, with `0 log 0 = 0`.
pub fn relative_entropy(f: &[f64], reference: &[f64], volume: f64) -> Result<f64, ObservableError> {
    let mut acc = 0.0;
    for (cell, (&x, &m)) in f.iter().zip(reference).enumerate() {
        if x < 0.0 || !x.is_finite() {
            return Err(ObservableError::NegativeDensity { cell, value: x });
        }
        if x == 0.0 {
            continue;
        }
        if !(m > 0.0) {
            return Err(ObservableError::NegativeDensity { cell, value: m });
        }
        acc += x * (x / m).ln() * volume;
    }
    Ok(acc)
}

/// `-Σ f log f * volume`.
pub fn entropy(f: &[f64], volume: f64) -> Result<f64, ObservableError> {
    let mut acc = 0.0;
    for (cell, &x) in f.iter().enumerate() {
        if x < 0.0 || !x.is_finite() {
            return Err(ObservableError::NegativeDensity { cell, value: x });
        }
        if x > 0.0 {
            acc -= x * x.ln() * volume;
        }
    }
    Ok(acc)
}

/// Velocity histogram pooled over all particles of all snapshots supplied.
#[derive(Clone, Debug, Serialize)]
pub struct VelocityHistogram<const D: usize> {
    pub grid: PhaseCellGrid<D>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl<const D: usize> VelocityHistogram<D> {
    pub fn from_particles<'a>(grid: &PhaseCellGrid<D>, particles: impl IntoIterator<Item = &'a ParticleState<D>>) -> Self {
        let mut counts = vec![0u64; grid.velocity_cells()];
        let mut total = 0;
        for z in particles {
            counts[grid.velocity_cell_of(&z.v)] += 1;
            total += 1;
        }
        Self { grid: *grid, counts, total }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.counts.iter().map(|&k| k as f64 / self.total as f64).collect()
    }

    pub fn densities(&self) -> Vec<f64> {
        let vol = self.grid.velocity_volume();
        self.counts.iter().map(|&k| k as f64 / (self.total as f64 * vol)).collect()
    }

    /// Plug-in `-Σ p log(p / vol)`, with the delta-method error for independent draws.
    pub fn entropy(&self) -> Estimate {
        let vol = self.grid.velocity_volume();
        let logs: Vec<(f64, f64)> = self
            .probabilities()
            .into_iter()
            .filter(|&p| p > 0.0)
            .map(|p| (p, (p / vol).ln()))
            .collect();
        self.plug_in(&logs, -1.0)
    }

    /// Plug-in `Σ p log(p / q)` against reference cell probabilities.
    pub fn relative_entropy(&self, reference: &[f64]) -> Estimate {
        let logs: Vec<(f64, f64)> = self
            .probabilities()
            .into_iter()
            .zip(reference)
            .filter(|(p, _)| *p > 0.0)
            .map(|(p, &q)| (p, (p / q).ln()))
            .collect();
        self.plug_in(&logs, 1.0)
    }

    fn plug_in(&self, logs: &[(f64, f64)], sign: f64) -> Estimate {
        let mean: f64 = logs.iter().map(|(p, l)| p * l).sum();
        let second: f64 = logs.iter().map(|(p, l)| p * l * l).sum();
        Estimate {
            value: sign * mean,
            stderr: ((second - mean * mean).max(0.0) / self.total as f64).sqrt(),
            samples: self.total as usize,
        }
    }

    /// Chi-square p-value against expected cell probabilities.
    pub fn chi_square_p_value(&self, probabilities: &[f64]) -> f64 {
        let observed: Vec<f64> = self.counts.iter().map(|&k| k as f64).collect();
        let expected: Vec<f64> = probabilities.iter().map(|p| p * self.total as f64).collect();
        crate::stats::chi_square_p_value(&observed, &expected)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntropyRow {
    pub t: f64,
    pub entropy: f64,
    pub entropy_stderr: f64,
    pub production: f64,
    pub production_stderr: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EntropyTrace {
    pub rows: Vec<EntropyRow>,
}

impl EntropyTrace {
    pub fn push(&mut self, row: EntropyRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.t <= row.t));
        self.rows.push(row);
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "t,S,S_stderr,D,D_stderr")?;
        for r in &self.rows {
            writeln!(out, "{:e},{:e},{:e},{:e},{:e}", r.t, r.entropy, r.entropy_stderr, r.production, r.production_stderr)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProductionEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    /// Draws skipped because the density vanished at one of the four velocities.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductionOptions {
    pub samples: usize,
    /// Inverse temperature of the Gaussian proposal; `None` uses half the matched value.
    pub proposal_beta: Option<f64>,
    /// Feed each proposal pair to the integrand as `(v_1, v)` instead of `(v, v_1)`.
    pub swap_roles: bool,
}

impl ProductionOptions {
    pub fn new(samples: usize) -> Self {
        Self { samples, proposal_beta: None, swap_roles: false }
    }
}

/// Monte Carlo estimate of
/// `1/4 ∫∫∫ (f'f_1' - f f_1) log(f'f_1' / (f f_1)) ((v - v_1)·nu)_+`
/// with `v, v_1` drawn from a Gaussian centered at the mean velocity and `nu` uniform.
pub fn entropy_production<const D: usize>(
    grid: &VelocityGrid<D>,
    f: &[f64],
    options: ProductionOptions,
    rng: &mut impl Rng,
) -> Result<ProductionEstimate, ObservableError> {
    let interp = Interpolant::new(*grid, f);
    let m = grid.moments(f);
    let mean = m.momentum * (1.0 / m.mass);
    let matched = D as f64 / (m.energy / m.mass - mean.norm_sq());
    let pb = options.proposal_beta.unwrap_or(0.5 * matched);
    let sigma = (1.0 / pb).sqrt();
    let log_norm = 0.5 * D as f64 * (pb / (2.0 * std::f64::consts::PI)).ln();
    let area = sphere_area(D);
    let mut stats = crate::stats::RunningStats::new();
    let mut skipped = 0;
    for _ in 0..options.samples {
        let za: Vector<D> = crate::draw::standard_normal(rng);
        let zb: Vector<D> = crate::draw::standard_normal(rng);
        let nu: Vector<D> = unit_vector(rng);
        let (mut v, mut v1) = (mean + za * sigma, mean + zb * sigma);
        if options.swap_roles {
            std::mem::swap(&mut v, &mut v1);
        }
        let log_p = 2.0 * log_norm - 0.5 * pb * ((v - mean).norm_sq() + (v1 - mean).norm_sq());
        let c = (v - v1).dot(&nu);
        if c <= 0.0 {
            stats.push(0.0);
            continue;
        }
        // post-collision velocities for this orientation of nu
        let vp = v - nu * c;
        let v1p = v1 + nu * c;
        let before = interp.log_eval(&v) + interp.log_eval(&v1);
        let after = interp.log_eval(&vp) + interp.log_eval(&v1p);
        if !before.is_finite() || !after.is_finite() {
            skipped += 1;
            stats.push(0.0);
            continue;
        }
        // (e^a - e^b)(a - b) = e^b (e^{a-b} - 1)(a - b)
        let diff = after - before;
        let integrand = (before - log_p).exp() * diff.exp_m1() * diff * c;
        stats.push(0.25 * area * integrand);
    }
    if options.samples > 0 && skipped == options.samples {
        return Err(ObservableError::ZeroDensityEncountered(skipped));
    }
    let e = stats.estimate();
    Ok(ProductionEstimate { value: e.value, stderr: e.stderr, samples: options.samples, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draw::{standard_normal, uniform_position};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn iid_ensemble(replicas: usize, n: usize, seed: u64) -> Vec<Vec<ParticleState<2>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..replicas)
            .map(|_| (0..n).map(|_| ParticleState::new(uniform_position(&mut rng), standard_normal(&mut rng))).collect())
            .collect()
    }

    #[test]
    fn cell_indexing() {
        let g = PhaseCellGrid::<2>::new(4, 8, 4.0);
        assert_eq!(g.cells(), 16 * 64);
        for cell in [0, 17, 500, g.cells() - 1] {
            let (x, v) = g.center(cell);
            assert_eq!(g.cell_of(&ParticleState::new(x, v)), cell);
        }
        assert_eq!(g.velocity_cell_of(&Vector([-100.0, 100.0])), 7);
        let p: f64 = g.maxwellian_cell_probabilities(1.0, &Vector::zero()).iter().sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn order_one_matches_sampling_law() {
        let ens = iid_ensemble(4000, 5, 1);
        let g = PhaseCellGrid::<2>::new(2, 6, 3.0);
        let est = estimate_marginal(&ens, 1, &g, MarginalOptions::default()).unwrap();
        assert!((est.total_mass() - 1.0).abs() < 1e-9);
        let probs = g.maxwellian_cell_probabilities(1.0, &Vector::zero());
        let mut ok = 0;
        for cell in 0..g.cells() {
            let (_, vc) = g.split(cell);
            let expected = probs[vc] * g.position_volume() / g.cell_volume();
            if est.value(cell).consistent_with(expected, 3.0) {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.97 * g.cells() as f64);
    }

    #[test]
    fn symmetrized_and_first_particle_agree() {
        let ens = iid_ensemble(3000, 4, 2);
        let g = PhaseCellGrid::<2>::new(1, 4, 2.0);
        let sym = estimate_marginal(&ens, 1, &g, MarginalOptions::default()).unwrap();
        let one = estimate_marginal(&ens, 1, &g, MarginalOptions { symmetrized: false, ..Default::default() }).unwrap();
        for c in 0..g.cells() {
            let d = sym.values[c] - one.values[c];
            let se = (sym.stderr[c].powi(2) + one.stderr[c].powi(2)).sqrt();
            assert!(d.abs() <= 4.0 * se + 1e-12);
        }
    }

    #[test]
    fn independent_pairs_factorize() {
        let ens = iid_ensemble(3000, 6, 3);
        let g = PhaseCellGrid::<2>::new(1, 3, 2.0);
        let two = estimate_marginal(&ens, 2, &g, MarginalOptions::default()).unwrap();
        let one = estimate_marginal(&ens, 1, &g, MarginalOptions::default()).unwrap();
        assert!((two.total_mass() - 1.0).abs() < 1e-9);
        let pairs: Vec<(usize, usize)> = (0..g.cells()).flat_map(|a| (0..g.cells()).map(move |b| (a, b))).collect();
        let mut ok = 0;
        for &(a, b) in &pairs {
            let prod = one.values[a] * one.values[b];
            if two.pair_value(a, b).consistent_with(prod, 3.0) {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.9 * pairs.len() as f64);
        let defect = chaos_defect(&ens, &g, &pairs, MarginalOptions::default()).unwrap();
        assert!(defect.fraction_consistent_with_zero(3.0) >= 0.95);
    }

    #[test]
    fn correlated_ensemble_shows_defect() {
        // every particle of a replica shares one velocity sign
        let mut ens = iid_ensemble(2000, 6, 4);
        for (r, rep) in ens.iter_mut().enumerate() {
            let s = if r % 2 == 0 { 1.0 } else { -1.0 };
            for z in rep.iter_mut() {
                z.v[0] = s * z.v[0].abs();
            }
        }
        let g = PhaseCellGrid::<2>::new(1, 2, 3.0);
        let defect = chaos_defect(&ens, &g, &[(0, 2), (0, 0)], MarginalOptions::default()).unwrap();
        assert!(defect.pairs[0].defect.value < -5.0 * defect.pairs[0].defect.stderr);
        assert!(defect.max_abs.value > 0.0);
    }

    #[test]
    fn empty_ensemble_rejected() {
        let ens: Vec<Vec<ParticleState<2>>> = Vec::new();
        let g = PhaseCellGrid::<2>::new(1, 2, 1.0);
        assert_eq!(estimate_marginal(&ens, 1, &g, MarginalOptions::default()).unwrap_err(), ObservableError::EmptyEnsemble);
    }

    #[test]
    fn entropies() {
        let g = VelocityGrid::<2>::new(24, 5.0);
        let m = g.maxwellian(1.0);
        assert_eq!(relative_entropy(&m, &m, g.weight()).unwrap(), 0.0);
        let shifted = g.maxwellian_with(1.0, &Vector([0.3, 0.0]), 1.0);
        assert!(relative_entropy(&shifted, &m, g.weight()).unwrap() > 0.0);
        let mut bad = m.clone();
        bad[3] = -1.0;
        assert!(matches!(relative_entropy(&bad, &m, g.weight()), Err(ObservableError::NegativeDensity { .. })));
        // Gaussian entropy 1 + log(2 pi) at unit temperature in 2-D
        let s = entropy(&m, g.weight()).unwrap();
        assert!((s - (1.0 + (2.0 * std::f64::consts::PI).ln())).abs() < 1e-4);
    }

    #[test]
    fn production_vanishes_at_equilibrium() {
        let g = VelocityGrid::<2>::new(24, 6.0);
        let m = g.maxwellian(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = entropy_production(&g, &m, ProductionOptions::new(20_000), &mut rng).unwrap();
        assert!(d.value.abs() <= 3.0 * d.stderr + 1e-9, "{d:?}");
    }

    #[test]
    fn histogram_entropy_of_maxwellian_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let parts: Vec<ParticleState<2>> =
            (0..200_000).map(|_| ParticleState::new(Vector::zero(), standard_normal(&mut rng))).collect();
        let g = PhaseCellGrid::<2>::new(1, 32, 5.0);
        let h = VelocityHistogram::from_particles(&g, &parts);
        let probs = g.maxwellian_cell_probabilities(1.0, &Vector::zero());
        assert!(h.chi_square_p_value(&probs) > 0.001);
        let s = h.entropy();
        // binning bias is O(h^2); allow a few percent
        assert!((s.value - (1.0 + (2.0 * std::f64::consts::PI).ln())).abs() < 0.05);
    }
}
