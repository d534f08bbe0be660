//! Collision trees, backward pseudo-trajectories and Monte Carlo evaluation of the terms of the
//! iterated Duhamel series, for both the hard-sphere hierarchy and its zero-diameter limit.
//!
//! Particles are labelled from 0. The `n` root particles are `0..n`; added particle `n + k`
//! attaches to `parent[k] < n + k`.

use std::io::Write;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::badsets::{free_flow_contact, Side};
use crate::draw::unit_vector;
use crate::initial_data::DensitySpec;
use crate::seeding;
use crate::sim::{flow_backward_counting, Configuration, SimError};
use crate::stats::{Estimate, RunningStats};
use crate::torus::{free_flight, pair_collision_time, torus_distance, wrap_position, ParticleState, CONTACT_TOL};
use crate::vector::{sphere_area, Vector};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("{count} trees exceed the enumeration limit")]
    SizeLimit { count: u128 },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("proposal density underflowed at |v| = {speed}")]
    ProposalUnderflow { speed: f64 },
    #[error(transparent)]
    Simulation(#[from] SimError),
}

pub const TREE_LIMIT: u128 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CollisionTree {
    pub roots: usize,
    /// `parent[k]` is the particle that `n + k` attaches to.
    pub parent: Vec<usize>,
}

impl CollisionTree {
    pub fn added(&self) -> usize {
        self.parent.len()
    }

    pub fn is_valid(&self) -> bool {
        self.parent.iter().enumerate().all(|(k, &a)| a < self.roots + k)
    }
}

/// `n (n+1) ... (n+s-1)`.
pub fn tree_count(n: usize, s: usize) -> u128 {
    (0..s).map(|k| (n + k) as u128).product()
}

/// All trees with `n` roots and `s` added particles, in lexicographic order of `parent`.
pub fn enumerate_trees(n: usize, s: usize) -> Result<Vec<CollisionTree>, TreeError> {
    if n == 0 {
        return Err(TreeError::InvalidParameters("need at least one root".into()));
    }
    let count = tree_count(n, s);
    if count > TREE_LIMIT {
        return Err(TreeError::SizeLimit { count });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut parent = vec![0usize; s];
    loop {
        out.push(CollisionTree { roots: n, parent: parent.clone() });
        // odometer with the last digit fastest; digit k ranges over 0..n+k
        let mut k = s;
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            parent[k] += 1;
            if parent[k] < n + k {
                break;
            }
            parent[k] = 0;
        }
    }
}

/// One uniformly random tree.
pub fn random_tree<R: Rng + ?Sized>(n: usize, s: usize, rng: &mut R) -> CollisionTree {
    CollisionTree { roots: n, parent: (0..s).map(|k| rng.random_range(0..n + k)).collect() }
}

#[derive(Clone, Debug, Serialize)]
pub struct TreeParameters<const D: usize> {
    /// Adjunction times, strictly decreasing, inside `(0, t)`.
    pub times: Vec<f64>,
    pub directions: Vec<Vector<D>>,
    pub velocities: Vec<Vector<D>>,
}

impl<const D: usize> TreeParameters<D> {
    fn validate(&self, s: usize, t: f64) -> Result<(), TreeError> {
        if self.times.len() != s || self.directions.len() != s || self.velocities.len() != s {
            return Err(TreeError::InvalidParameters(format!("expected {s} adjunction parameters")));
        }
        let mut prev = t;
        for &ti in &self.times {
            if !(ti < prev || (ti == prev && ti == t)) || ti < 0.0 {
                return Err(TreeError::InvalidParameters(format!("times {:?} not decreasing in [0, {t}]", self.times)));
            }
            prev = ti;
        }
        for nu in &self.directions {
            if (nu.norm() - 1.0).abs() > crate::torus::UNIT_NORM_TOL {
                return Err(TreeError::InvalidParameters(format!("direction {nu:?} is not a unit vector")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Variant {
    /// Zero-diameter particles, free flight between adjunctions.
    Boltzmann,
    /// Diameter `eps` in a system of `particles` hard spheres.
    Bbgky { eps: f64, particles: usize },
}

impl Variant {
    /// Hard-sphere variant with `N eps^{d-1} = 1`.
    pub fn bbgky_scaled(eps: f64, dim: usize) -> Self {
        Variant::Bbgky { eps, particles: eps.powi(-(dim as i32 - 1)).round() as usize }
    }

    pub fn label(&self) -> String {
        match self {
            Variant::Boltzmann => "boltzmann".into(),
            Variant::Bbgky { eps, .. } => format!("bbgky(eps={eps})"),
        }
    }

    /// `(N - n) ... (N - n - s + 1) eps^{(d-1)s}`; 1 for the zero-diameter variant.
    pub fn prefactor(&self, n: usize, s: usize, dim: usize) -> f64 {
        match *self {
            Variant::Boltzmann => 1.0,
            Variant::Bbgky { eps, particles } => (0..s)
                .map(|k| (particles as f64 - (n + k) as f64).max(0.0) * eps.powi(dim as i32 - 1))
                .product(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Classification {
    /// No overlap, no recollision and the time-0 configuration has no backward contact.
    Good,
    /// An adjoined particle would overlap another one; the trajectory does not exist.
    Overlap,
    /// A hard-sphere event other than an adjunction scattering occurred.
    Recollision,
    /// Free of recollisions, but the time-0 configuration touches under backward free flow.
    BackwardContact,
}

#[derive(Clone, Debug, Serialize)]
pub struct PseudoTrajectoryResult<const D: usize> {
    /// Configuration at time 0; `None` after an overlap.
    pub configuration: Option<Vec<ParticleState<D>>>,
    pub classification: Classification,
    pub variant: Variant,
    /// `Π (v_i - v_{a(i)}(t_i)) · nu_i`.
    pub weight: f64,
    /// Hard-sphere events beyond the adjunctions.
    pub recollisions: usize,
}

fn backward<const D: usize>(
    particles: Vec<ParticleState<D>>,
    duration: f64,
    variant: Variant,
) -> Result<(Vec<ParticleState<D>>, usize), TreeError> {
    if duration <= 0.0 {
        return Ok((particles, 0));
    }
    match variant {
        Variant::Boltzmann => Ok((particles.iter().map(|z| free_flight(z, -duration)).collect(), 0)),
        Variant::Bbgky { eps, .. } => {
            let (end, events) = flow_backward_counting(&Configuration::new_unchecked(particles, eps), duration)?;
            Ok((end.particles, events))
        }
    }
}

/// Runs the backward pseudo-dynamics of `tree` from `z_n` at time `t` down to time 0.
pub fn build_pseudo_trajectory<const D: usize>(
    tree: &CollisionTree,
    z_n: &[ParticleState<D>],
    t: f64,
    params: &TreeParameters<D>,
    variant: Variant,
) -> Result<PseudoTrajectoryResult<D>, TreeError> {
    if z_n.len() != tree.roots || !tree.is_valid() {
        return Err(TreeError::InvalidParameters("tree does not match the root configuration".into()));
    }
    params.validate(tree.added(), t)?;
    let mut current = z_n.to_vec();
    let mut now = t;
    let mut weight = 1.0;
    let mut recollisions = 0;
    for k in 0..tree.added() {
        let (moved, events) = backward(current, now - params.times[k], variant)?;
        current = moved;
        recollisions += events;
        now = params.times[k];
        let a = tree.parent[k];
        let nu = params.directions[k];
        let vi = params.velocities[k];
        let x = match variant {
            Variant::Boltzmann => current[a].x,
            Variant::Bbgky { eps, .. } => {
                let x = wrap_position(current[a].x + nu * eps);
                if current.iter().any(|z| torus_distance(&z.x, &x) < eps - CONTACT_TOL) {
                    return Ok(PseudoTrajectoryResult {
                        configuration: None,
                        classification: Classification::Overlap,
                        variant,
                        weight: 0.0,
                        recollisions,
                    });
                }
                x
            }
        };
        let va = current[a].v;
        let c = (vi - va).dot(&nu);
        weight *= c;
        let (va_new, vi_new) = if c > 0.0 {
            let exchange = (va - vi).dot(&nu);
            (va - nu * exchange, vi + nu * exchange)
        } else {
            (va, vi)
        };
        current[a].v = va_new;
        current.push(ParticleState { x, v: vi_new });
    }
    let (last, events) = backward(current, now, variant)?;
    recollisions += events;
    let classification = match variant {
        Variant::Boltzmann => Classification::Good,
        Variant::Bbgky { eps, .. } => {
            if recollisions > 0 {
                Classification::Recollision
            } else if free_flow_contact(&last, eps - CONTACT_TOL, t, Side::Minus) {
                Classification::BackwardContact
            } else {
                Classification::Good
            }
        }
    };
    Ok(PseudoTrajectoryResult { configuration: Some(last), classification, variant, weight, recollisions })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Admissibility {
    InVplus,
    NotInVplus,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AdmissibilityReport {
    pub class: Admissibility,
    /// A forward history removing the highest label at each contact reaches `n` particles.
    pub history_found: bool,
    pub in_plus: bool,
    pub in_minus: bool,
}

/// Earliest contact among the particles under free flight on `[0, horizon]`.
fn first_contact<const D: usize>(particles: &[ParticleState<D>], eps: f64, horizon: f64) -> Option<(f64, usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..particles.len() {
        for j in i + 1..particles.len() {
            if let Ok(Some(c)) = pair_collision_time(&particles[i], &particles[j], eps, horizon) {
                if best.is_none_or(|(bt, _, _)| c.time < bt) {
                    best = Some((c.time, i, j));
                }
            }
        }
    }
    best
}

/// Searches the forward history: free flight until the next contact, which must involve the
/// highest remaining label; that particle is removed with or without scattering its partner.
fn forward_history<const D: usize>(
    particles: Vec<ParticleState<D>>,
    labels: Vec<usize>,
    n: usize,
    eps: f64,
    remaining: f64,
) -> bool {
    if labels.len() == n {
        return true;
    }
    let Some((tau, i, j)) = first_contact(&particles, eps, remaining) else {
        return false;
    };
    let top = labels.len() - 1;
    // labels stay sorted, so the highest label is last
    if j != top {
        return false;
    }
    let moved: Vec<ParticleState<D>> = particles.iter().map(|z| free_flight(z, tau)).collect();
    let nu = match crate::torus::minimal_image(&moved[j].x, &moved[i].x).normalized() {
        Some(nu) => nu,
        None => return false,
    };
    let mut kept_labels = labels.clone();
    kept_labels.pop();
    for scatter in [false, true] {
        let mut next = moved[..top].to_vec();
        if scatter {
            let exchange = (moved[i].v - moved[j].v).dot(&nu);
            next[i].v = moved[i].v - nu * exchange;
        }
        if forward_history(next, kept_labels.clone(), n, eps, remaining - tau) {
            return true;
        }
    }
    false
}

/// Tests whether a time-0 configuration of `n + s` particles can be reached by a pseudo-trajectory
/// ending with `n` particles within `horizon`.
pub fn classify_admissible<const D: usize>(
    particles: &[ParticleState<D>],
    n: usize,
    horizon: f64,
    eps: f64,
) -> AdmissibilityReport {
    let in_plus = free_flow_contact(particles, eps + CONTACT_TOL, horizon, Side::Plus);
    let in_minus = free_flow_contact(particles, eps - CONTACT_TOL, horizon, Side::Minus);
    let history_found = particles.len() <= n
        || forward_history(particles.to_vec(), (0..particles.len()).collect(), n, eps, horizon);
    let class = if history_found && !in_minus { Admissibility::InVplus } else { Admissibility::NotInVplus };
    AdmissibilityReport { class, history_found, in_plus, in_minus }
}

/// Draws times, directions and Gaussian velocities; returns them with the importance factor
/// `t^s / s! * |S|^s / Π p(v_i)`.
pub fn sample_parameters<const D: usize, R: Rng + ?Sized>(
    s: usize,
    t: f64,
    proposal_beta: f64,
    rng: &mut R,
) -> Result<(TreeParameters<D>, f64), TreeError> {
    let mut times: Vec<f64> = (0..s).map(|_| t * rng.random::<f64>()).collect();
    times.sort_by(|a, b| b.total_cmp(a));
    let directions: Vec<Vector<D>> = (0..s).map(|_| unit_vector(rng)).collect();
    let sigma = proposal_beta.powf(-0.5);
    let log_norm = 0.5 * D as f64 * (proposal_beta / (2.0 * std::f64::consts::PI)).ln();
    let mut log_factor = s as f64 * t.ln() - ln_factorial(s) + s as f64 * sphere_area(D).ln();
    let mut velocities = Vec::with_capacity(s);
    for _ in 0..s {
        let v: Vector<D> = crate::draw::standard_normal::<D, R>(rng) * sigma;
        let log_p = log_norm - 0.5 * proposal_beta * v.norm_sq();
        if !log_p.is_finite() {
            return Err(TreeError::ProposalUnderflow { speed: v.norm() });
        }
        log_factor -= log_p;
        velocities.push(v);
    }
    let factor = if s == 0 { 1.0 } else { log_factor.exp() };
    if !factor.is_finite() {
        return Err(TreeError::ProposalUnderflow { speed: velocities.iter().map(|v| v.norm()).fold(0.0, f64::max) });
    }
    Ok((TreeParameters { times, directions, velocities }, factor))
}

fn ln_factorial(s: usize) -> f64 {
    (1..=s).map(|k| (k as f64).ln()).sum()
}

/// Trees summed per parameter draw: all of them up to this many added particles.
pub const EXHAUSTIVE_TREE_LIMIT: usize = 4;

#[derive(Clone, Debug, Serialize)]
pub struct SeriesTerm {
    pub n: usize,
    pub s: usize,
    pub t: f64,
    pub variant: Variant,
    /// Including the combinatorial prefactor of the hard-sphere variant.
    pub estimate: Estimate,
    /// Without the prefactor (identical for the zero-diameter variant).
    pub uncorrected: Estimate,
    /// Fraction of (draw, tree) evaluations classified as recollision or overlap.
    pub recollision_fraction: f64,
    pub evaluations: usize,
}

impl SeriesTerm {
    pub fn csv_header() -> &'static str {
        "n,s,t,variant,estimate,stderr,recollision_fraction,samples"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{},{:e},{:e},{:e},{}",
            self.n,
            self.s,
            self.t,
            self.variant.label(),
            self.estimate.value,
            self.estimate.stderr,
            self.recollision_fraction,
            self.estimate.samples
        )
    }
}

pub fn write_series_csv(terms: &[SeriesTerm], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", SeriesTerm::csv_header())?;
    for term in terms {
        writeln!(out, "{}", term.csv_row())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct SeriesOptions {
    pub samples: usize,
    /// `None` uses half of the density's `beta`.
    pub proposal_beta: Option<f64>,
}

/// Signed Monte Carlo estimate of the `s`-th term of the series at `z_n` and time `t`.
pub fn evaluate_series_term<const D: usize, R: Rng + ?Sized>(
    n: usize,
    s: usize,
    t: f64,
    f0: &DensitySpec,
    z_n: &[ParticleState<D>],
    variant: Variant,
    options: SeriesOptions,
    rng: &mut R,
) -> Result<SeriesTerm, TreeError> {
    if z_n.len() != n || t < 0.0 {
        return Err(TreeError::InvalidParameters(format!("{} roots for n = {n}, t = {t}", z_n.len())));
    }
    let prefactor = variant.prefactor(n, s, D);
    if s == 0 {
        let tree = CollisionTree { roots: n, parent: Vec::new() };
        let empty = TreeParameters { times: vec![], directions: vec![], velocities: vec![] };
        let res = build_pseudo_trajectory(&tree, z_n, t, &empty, variant)?;
        let value = res.configuration.map(|c| f0.product_density(&c)).unwrap_or(0.0);
        let bad = matches!(res.classification, Classification::Overlap | Classification::Recollision);
        return Ok(SeriesTerm {
            n,
            s,
            t,
            variant,
            estimate: Estimate::exact(value),
            uncorrected: Estimate::exact(value),
            recollision_fraction: if bad { 1.0 } else { 0.0 },
            evaluations: 1,
        });
    }
    let proposal_beta = options.proposal_beta.unwrap_or(0.5 * f0.beta);
    let all_trees = if s <= EXHAUSTIVE_TREE_LIMIT { Some(enumerate_trees(n, s)?) } else { None };
    let tree_total = tree_count(n, s) as f64;
    let shards = seeding::sharded(options.samples, rng, |count, local| -> Result<(RunningStats, usize, usize), TreeError> {
        let mut stats = RunningStats::new();
        let (mut bad, mut evaluations) = (0usize, 0usize);
        for _ in 0..count {
            let (params, factor) = sample_parameters::<D, _>(s, t, proposal_beta, local)?;
            let sampled;
            let trees: &[CollisionTree] = match &all_trees {
                Some(all) => all,
                None => {
                    sampled = [random_tree(n, s, local)];
                    &sampled
                }
            };
            let tree_weight = if all_trees.is_some() { 1.0 } else { tree_total };
            let mut value = 0.0;
            for tree in trees {
                let res = build_pseudo_trajectory(tree, z_n, t, &params, variant)?;
                evaluations += 1;
                if matches!(res.classification, Classification::Overlap | Classification::Recollision) {
                    bad += 1;
                }
                if let Some(config) = res.configuration {
                    value += res.weight * f0.product_density(&config);
                }
            }
            stats.push(value * factor * tree_weight);
        }
        Ok((stats, bad, evaluations))
    });
    let mut stats = RunningStats::new();
    let (mut bad, mut evaluations) = (0, 0);
    for shard in shards {
        let (st, b, e) = shard?;
        stats.merge(&st);
        bad += b;
        evaluations += e;
    }
    let uncorrected = stats.estimate();
    let estimate = Estimate { value: uncorrected.value * prefactor, stderr: uncorrected.stderr * prefactor, ..uncorrected };
    Ok(SeriesTerm {
        n,
        s,
        t,
        variant,
        estimate,
        uncorrected,
        recollision_fraction: if evaluations > 0 { bad as f64 / evaluations as f64 } else { 0.0 },
        evaluations,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RecollisionRate {
    pub fraction: f64,
    pub stderr: f64,
    pub recollisions: usize,
    pub overlaps: usize,
    pub evaluations: usize,
}

/// Fraction of pseudo-trajectories (parameter draw times tree) with a recollision or an overlap.
/// Draws do not depend on `variant`, so equal seeds give common random numbers across diameters.
#[allow(clippy::too_many_arguments)]
pub fn recollision_rate<const D: usize, R: Rng + ?Sized>(
    z_n: &[ParticleState<D>],
    s: usize,
    t: f64,
    variant: Variant,
    trees: &[CollisionTree],
    samples: usize,
    proposal_beta: f64,
    rng: &mut R,
) -> Result<RecollisionRate, TreeError> {
    let shards = seeding::sharded(samples, rng, |count, local| -> Result<(usize, usize, usize), TreeError> {
        let (mut rec, mut ovl, mut evals) = (0, 0, 0);
        for _ in 0..count {
            let (params, _) = sample_parameters::<D, _>(s, t, proposal_beta, local)?;
            for tree in trees {
                let res = build_pseudo_trajectory(tree, z_n, t, &params, variant)?;
                evals += 1;
                match res.classification {
                    Classification::Recollision => rec += 1,
                    Classification::Overlap => ovl += 1,
                    _ => {}
                }
            }
        }
        Ok((rec, ovl, evals))
    });
    let (mut rec, mut ovl, mut evals) = (0, 0, 0);
    for shard in shards {
        let (r, o, e) = shard?;
        rec += r;
        ovl += o;
        evals += e;
    }
    let fraction = if evals > 0 { (rec + ovl) as f64 / evals as f64 } else { 0.0 };
    Ok(RecollisionRate {
        fraction,
        stderr: crate::stats::binomial_stderr(fraction, evals),
        recollisions: rec,
        overlaps: ovl,
        evaluations: evals,
    })
}
