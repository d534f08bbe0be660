//! Initial densities with a Gaussian envelope and samplers for the particle ensembles built
//! from them: factorized with exclusion, grand canonical, and grand canonical conditioned
//! on having no collision during a short initial interval.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::Serialize;
use thiserror::Error;

use crate::badsets::{free_flow_contact, Side};
use crate::draw::{standard_normal, uniform_position};
use crate::sim::Configuration;
use crate::stats::{binomial_stderr, Estimate};
use crate::torus::{torus_distance, ParticleState};
use crate::vector::Vector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("density exceeds its Gaussian envelope by factor {ratio}")]
    EnvelopeViolated { ratio: f64 },
    #[error("no acceptance after {attempts} attempts")]
    RejectionBudgetExceeded { attempts: usize },
    #[error("invalid density: {0}")]
    InvalidSpec(String),
}

/// Position dependence of the initial density, normalized to integrate to one on the torus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialProfile {
    Uniform,
    /// `1 + amplitude * cos(2 pi x[axis])`, `|amplitude| < 1`.
    Cosine { amplitude: f64, axis: usize },
}

impl SpatialProfile {
    pub fn density<const D: usize>(&self, x: &Vector<D>) -> f64 {
        match *self {
            SpatialProfile::Uniform => 1.0,
            SpatialProfile::Cosine { amplitude, axis } => 1.0 + amplitude * (2.0 * PI * x[axis]).cos(),
        }
    }

    pub fn max_density(&self) -> f64 {
        match *self {
            SpatialProfile::Uniform => 1.0,
            SpatialProfile::Cosine { amplitude, .. } => 1.0 + amplitude.abs(),
        }
    }
}

pub type VelocityDensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Velocity dependence of the initial density (a probability density on `R^d`).
#[derive(Clone)]
pub enum VelocityForm {
    /// Centered Gaussian with inverse temperature `beta` of the spec.
    Maxwellian,
    /// Equal mixture of Gaussians of standard deviation `width` centered at `±shift e_1`.
    TwoBump { shift: f64, width: f64 },
    /// User-supplied normalized density, sampled by rejection under the envelope.
    Custom(VelocityDensityFn),
}

impl fmt::Debug for VelocityForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VelocityForm::Maxwellian => write!(f, "Maxwellian"),
            VelocityForm::TwoBump { shift, width } => {
                write!(f, "TwoBump {{ shift: {shift}, width: {width} }}")
            }
            VelocityForm::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// `f0(x, v) = profile(x) * g(v)`, dominated by `exp(-mu - beta |v|^2 / 2)`.
#[derive(Clone, Debug)]
pub struct DensitySpec {
    pub beta: f64,
    /// Envelope constant; `None` means the largest value the form provably allows.
    pub mu: Option<f64>,
    pub profile: SpatialProfile,
    pub form: VelocityForm,
}

pub const DEFAULT_TWO_BUMP_SHIFT: f64 = 1.0;
pub const DEFAULT_TWO_BUMP_WIDTH: f64 = 0.6;

impl DensitySpec {
    pub fn maxwellian(beta: f64) -> Self {
        Self {
            beta,
            mu: None,
            profile: SpatialProfile::Uniform,
            form: VelocityForm::Maxwellian,
        }
    }

    pub fn two_bump(beta: f64, shift: f64, width: f64) -> Self {
        Self {
            beta,
            mu: None,
            profile: SpatialProfile::Uniform,
            form: VelocityForm::TwoBump { shift, width },
        }
    }

    pub fn custom(beta: f64, mu: f64, density: VelocityDensityFn) -> Self {
        Self {
            beta,
            mu: Some(mu),
            profile: SpatialProfile::Uniform,
            form: VelocityForm::Custom(density),
        }
    }

    pub fn with_profile(mut self, profile: SpatialProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = Some(mu);
        self
    }

    pub fn validate(&self, dim: usize) -> Result<(), SampleError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(SampleError::InvalidSpec(format!("beta must be positive, got {}", self.beta)));
        }
        if let SpatialProfile::Cosine { amplitude, axis } = self.profile {
            if amplitude.abs() >= 1.0 || axis >= dim {
                return Err(SampleError::InvalidSpec(format!(
                    "cosine profile needs |amplitude| < 1 and axis < {dim}"
                )));
            }
        }
        match self.form {
            VelocityForm::TwoBump { width, shift } => {
                if !(width > 0.0) || !shift.is_finite() {
                    return Err(SampleError::InvalidSpec("two-bump width must be positive".into()));
                }
                if self.beta * width * width >= 1.0 {
                    return Err(SampleError::InvalidSpec(format!(
                        "two-bump width {width} too large for envelope beta {}",
                        self.beta
                    )));
                }
            }
            VelocityForm::Custom(_) if self.mu.is_none() => {
                return Err(SampleError::InvalidSpec("custom density needs an explicit mu".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Largest envelope constant valid for the form (closed-form supremum bound).
    pub fn natural_mu(&self, dim: usize) -> Option<f64> {
        let d = dim as f64;
        let rho = self.profile.max_density();
        match self.form {
            VelocityForm::Maxwellian => Some(-(rho * (self.beta / (2.0 * PI)).powf(d / 2.0)).ln()),
            VelocityForm::TwoBump { shift, width } => {
                let a = 1.0 / (width * width);
                if a <= self.beta {
                    return None;
                }
                // transverse components only lower the ratio, so the supremum is 1-D in v_1
                let log_sup = (d / 2.0) * (a / (2.0 * PI)).ln()
                    + two_bump_log_sup(self.beta, a, shift.abs());
                Some(-(rho.ln() + log_sup) - 1e-12)
            }
            VelocityForm::Custom(_) => None,
        }
    }

    pub fn mu(&self, dim: usize) -> f64 {
        self.mu
            .or_else(|| self.natural_mu(dim))
            .expect("validated spec has an envelope constant")
    }

    pub fn velocity_density<const D: usize>(&self, v: &Vector<D>) -> f64 {
        let d = D as f64;
        match &self.form {
            VelocityForm::Maxwellian => {
                (self.beta / (2.0 * PI)).powf(d / 2.0) * (-0.5 * self.beta * v.norm_sq()).exp()
            }
            VelocityForm::TwoBump { shift, width } => {
                let a = 1.0 / (width * width);
                let norm = (a / (2.0 * PI)).powf(d / 2.0);
                let mut plus = *v;
                plus[0] -= shift;
                let mut minus = *v;
                minus[0] += shift;
                0.5 * norm * ((-0.5 * a * plus.norm_sq()).exp() + (-0.5 * a * minus.norm_sq()).exp())
            }
            VelocityForm::Custom(g) => g(v.as_slice()),
        }
    }

    pub fn spatial_density<const D: usize>(&self, x: &Vector<D>) -> f64 {
        self.profile.density(x)
    }

    pub fn density<const D: usize>(&self, x: &Vector<D>, v: &Vector<D>) -> f64 {
        self.spatial_density(x) * self.velocity_density(v)
    }

    /// Product density of a configuration.
    pub fn product_density<const D: usize>(&self, particles: &[ParticleState<D>]) -> f64 {
        particles.iter().map(|z| self.density(&z.x, &z.v)).product()
    }

    /// `exp(-mu - beta |v|^2 / 2)`.
    pub fn envelope<const D: usize>(&self, v: &Vector<D>) -> f64 {
        (-self.mu(D) - 0.5 * self.beta * v.norm_sq()).exp()
    }

    /// Largest value of `f0 * exp(mu + beta |v|^2 / 2)` on a probe grid covering
    /// `|v_k| <= 8 / sqrt(beta)` and the spatial profile's extremes.
    pub fn envelope_probe<const D: usize>(&self) -> f64 {
        let per_axis = if D <= 2 { 161 } else { 41 };
        let half = 8.0 / self.beta.sqrt();
        let step = 2.0 * half / (per_axis - 1) as f64;
        let mu = self.mu(D);
        let rho = self.profile.max_density();
        let mut best: f64 = 0.0;
        let mut idx = [0usize; D];
        loop {
            let mut v = Vector::<D>::zero();
            for k in 0..D {
                v[k] = -half + idx[k] as f64 * step;
            }
            let r = rho * self.velocity_density(&v) * (mu + 0.5 * self.beta * v.norm_sq()).exp();
            best = best.max(r);
            let mut a = 0;
            loop {
                if a == D {
                    return best;
                }
                idx[a] += 1;
                if idx[a] < per_axis {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
        }
    }

    pub fn check_envelope<const D: usize>(&self) -> Result<f64, SampleError> {
        self.validate(D)?;
        let ratio = self.envelope_probe::<D>();
        if ratio > 1.0 + 1e-12 {
            return Err(SampleError::EnvelopeViolated { ratio });
        }
        Ok(ratio)
    }

    /// `E|v|^2` under the velocity density (closed form for built-in forms).
    pub fn second_moment<const D: usize>(&self) -> Option<f64> {
        let d = D as f64;
        match self.form {
            VelocityForm::Maxwellian => Some(d / self.beta),
            VelocityForm::TwoBump { shift, width } => Some(shift * shift + d * width * width),
            VelocityForm::Custom(_) => None,
        }
    }

    /// Inverse temperature of the centered Maxwellian with the same energy.
    pub fn matched_beta<const D: usize>(&self) -> Option<f64> {
        self.second_moment::<D>().map(|m| D as f64 / m)
    }

    pub fn sample_velocity<const D: usize, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vector<D>, SampleError> {
        match &self.form {
            VelocityForm::Maxwellian => Ok(standard_normal::<D, R>(rng) * (1.0 / self.beta.sqrt())),
            VelocityForm::TwoBump { shift, width } => {
                let mut v = standard_normal::<D, R>(rng) * *width;
                v[0] += if rng.random::<bool>() { *shift } else { -*shift };
                Ok(v)
            }
            VelocityForm::Custom(_) => {
                let mu = self.mu(D);
                let rho = self.profile.max_density();
                for _ in 0..1_000_000 {
                    let v = standard_normal::<D, R>(rng) * (1.0 / self.beta.sqrt());
                    let accept = self.velocity_density(&v) * rho * (mu + 0.5 * self.beta * v.norm_sq()).exp();
                    if accept > 1.0 + 1e-12 {
                        return Err(SampleError::EnvelopeViolated { ratio: accept });
                    }
                    if rng.random::<f64>() < accept {
                        return Ok(v);
                    }
                }
                Err(SampleError::RejectionBudgetExceeded { attempts: 1_000_000 })
            }
        }
    }

    pub fn sample_position<const D: usize, R: Rng + ?Sized>(&self, rng: &mut R) -> Vector<D> {
        match self.profile {
            SpatialProfile::Uniform => uniform_position(rng),
            SpatialProfile::Cosine { .. } => {
                let top = self.profile.max_density();
                loop {
                    let x = uniform_position(rng);
                    if rng.random::<f64>() * top < self.profile.density(&x) {
                        return x;
                    }
                }
            }
        }
    }
}

/// `sup_s log( (exp(-a (s-u)^2/2) + exp(-a (s+u)^2/2)) / 2 * exp(beta s^2 / 2) )` for `a > beta`.
fn two_bump_log_sup(beta: f64, a: f64, u: f64) -> f64 {
    let h = |s: f64| {
        let left = -0.5 * a * (s - u) * (s - u) + 0.5 * beta * s * s;
        let right = -0.5 * a * (s + u) * (s + u) + 0.5 * beta * s * s;
        let m = left.max(right);
        m + (0.5 * ((left - m).exp() + (right - m).exp())).ln()
    };
    // the ratio is even in s and its maximizers lie in [0, a u / (a - beta)]
    let hi = a * u / (a - beta) + 1e-9;
    let steps = 4000;
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..=steps {
        let val = h(hi * k as f64 / steps as f64);
        if val > best.1 {
            best = (k, val);
        }
    }
    let mut lo_s = hi * best.0.saturating_sub(1) as f64 / steps as f64;
    let mut hi_s = hi * (best.0 + 1).min(steps) as f64 / steps as f64;
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let m1 = hi_s - g * (hi_s - lo_s);
        let m2 = lo_s + g * (hi_s - lo_s);
        if h(m1) < h(m2) {
            lo_s = m1;
        } else {
            hi_s = m2;
        }
    }
    best.1.max(h(0.5 * (lo_s + hi_s)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingMethod {
    /// Exact: draw all positions independently and accept only non-overlapping ones.
    GlobalRejection,
    /// Approximate: single-site Metropolis moves with proposals from the spatial profile.
    MarkovChain { burn_in_sweeps: Option<usize> },
}

pub const REJECTION_BUDGET: usize = 1_000_000;

fn overlaps_any<const D: usize>(x: &Vector<D>, placed: &[Vector<D>], eps: f64, skip: Option<usize>) -> bool {
    placed
        .iter()
        .enumerate()
        .any(|(k, y)| Some(k) != skip && torus_distance(x, y) <= eps)
}

/// One attempt at `n` independent positions, abandoned at the first overlap.
fn try_positions<const D: usize, R: Rng + ?Sized>(
    spec: &DensitySpec,
    n: usize,
    eps: f64,
    rng: &mut R,
) -> Option<Vec<Vector<D>>> {
    let mut placed = Vec::with_capacity(n);
    for _ in 0..n {
        let x = spec.sample_position::<D, R>(rng);
        if overlaps_any(&x, &placed, eps, None) {
            return None;
        }
        placed.push(x);
    }
    Some(placed)
}

fn attach_velocities<const D: usize, R: Rng + ?Sized>(
    spec: &DensitySpec,
    positions: Vec<Vector<D>>,
    eps: f64,
    rng: &mut R,
) -> Result<Configuration<D>, SampleError> {
    let particles = positions
        .into_iter()
        .map(|x| Ok(ParticleState { x, v: spec.sample_velocity(rng)? }))
        .collect::<Result<Vec<_>, SampleError>>()?;
    Ok(Configuration::new_unchecked(particles, eps))
}

/// Samples `n` particles from the product density restricted to non-overlapping positions.
/// Returns the configuration and the number of position attempts used.
pub fn sample_factorized_counted<const D: usize, R: Rng + ?Sized>(
    spec: &DensitySpec,
    n: usize,
    eps: f64,
    method: SamplingMethod,
    rng: &mut R,
) -> Result<(Configuration<D>, usize), SampleError> {
    spec.validate(D)?;
    match method {
        SamplingMethod::GlobalRejection => {
            for attempt in 1..=REJECTION_BUDGET {
                if let Some(pos) = try_positions::<D, R>(spec, n, eps, rng) {
                    return Ok((attach_velocities(spec, pos, eps, rng)?, attempt));
                }
            }
            Err(SampleError::RejectionBudgetExceeded {
                attempts: REJECTION_BUDGET,
            })
        }
        SamplingMethod::MarkovChain { burn_in_sweeps } => {
            // random sequential insertion gives a valid starting point
            let mut placed: Vec<Vector<D>> = Vec::with_capacity(n);
            let mut tries = 0usize;
            while placed.len() < n {
                tries += 1;
                if tries > REJECTION_BUDGET {
                    return Err(SampleError::RejectionBudgetExceeded { attempts: tries });
                }
                let x = spec.sample_position::<D, R>(rng);
                if !overlaps_any(&x, &placed, eps, None) {
                    placed.push(x);
                }
            }
            let sweeps = burn_in_sweeps.unwrap_or(100);
            for _ in 0..sweeps {
                for i in 0..n {
                    let x = spec.sample_position::<D, R>(rng);
                    if !overlaps_any(&x, &placed, eps, Some(i)) {
                        placed[i] = x;
                    }
                }
            }
            Ok((attach_velocities(spec, placed, eps, rng)?, tries))
        }
    }
}

pub fn sample_factorized<const D: usize, R: Rng + ?Sized>(
    spec: &DensitySpec,
    n: usize,
    eps: f64,
    method: SamplingMethod,
    rng: &mut R,
) -> Result<Configuration<D>, SampleError> {
    sample_factorized_counted(spec, n, eps, method, rng).map(|(c, _)| c)
}

/// Probability that `n` independent positions drawn from the profile do not overlap, which is
/// the normalizing constant of the factorized state relative to the unconstrained product.
pub fn estimate_partition_function<const D: usize, R: Rng + ?Sized>(
    spec: &DensitySpec,
    n: usize,
    eps: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate, SampleError> {
    spec.validate(D)?;
    if n <= 1 {
        return Ok(Estimate {
            value: 1.0,
            stderr: 0.0,
            samples,
        });
    }
    let accepted = (0..samples)
        .filter(|_| try_positions::<D, R>(spec, n, eps, rng).is_some())
        .count();
    let p = accepted as f64 / samples as f64;
    Ok(Estimate {
        value: p,
        stderr: binomial_stderr(p, samples),
        samples,
    })
}

/// Conditioning of the grand-canonical state on a collision-free start.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningSpec {
    /// Length of the initial interval with no collision.
    pub delta: f64,
}

pub const DEFAULT_CONDITIONING_DELTA: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct GrandCanonicalSample<const D: usize> {
    pub n: usize,
    pub config: Configuration<D>,
    /// Proposals rejected before this one was accepted.
    pub accepted_after: usize,
}

/// Activity `eps^{1-d}` giving Boltzmann-Grad scaling.
pub fn boltzmann_grad_activity(eps: f64, dim: usize) -> f64 {
    eps.powf(1.0 - dim as f64)
}

/// Exact rejection sampler: Poisson particle number with mean equal to the activity (truncated
/// at `mean + 10 sqrt(mean)`), independent particles from `f0`, accepted when no two overlap
/// and, if conditioned, when no pair meets within distance `eps` under free flow on `[0, delta]`.
pub fn sample_grand_canonical<const D: usize, R: Rng + ?Sized>(
    spec: &DensitySpec,
    eps: f64,
    conditioning: Option<&ConditioningSpec>,
    rng: &mut R,
) -> Result<GrandCanonicalSample<D>, SampleError> {
    sample_grand_canonical_with_activity(spec, eps, boltzmann_grad_activity(eps, D), conditioning, rng)
}

pub fn sample_grand_canonical_with_activity<const D: usize, R: Rng + ?Sized>(
    spec: &DensitySpec,
    eps: f64,
    activity: f64,
    conditioning: Option<&ConditioningSpec>,
    rng: &mut R,
) -> Result<GrandCanonicalSample<D>, SampleError> {
    spec.validate(D)?;
    if !(activity > 0.0 && activity.is_finite()) {
        return Err(SampleError::InvalidSpec(format!("activity {activity}")));
    }
    if let Some(c) = conditioning {
        if !(c.delta > 0.0) {
            return Err(SampleError::InvalidSpec("conditioning delta must be positive".into()));
        }
    }
    let poisson = Poisson::new(activity).map_err(|e| SampleError::InvalidSpec(e.to_string()))?;
    let n_max = (activity + 10.0 * activity.sqrt()).floor() as usize;
    for attempt in 0..REJECTION_BUDGET {
        let n = loop {
            let k = poisson.sample(rng) as usize;
            if k <= n_max {
                break k;
            }
        };
        let Some(positions) = try_positions::<D, R>(spec, n, eps, rng) else {
            continue;
        };
        let config = attach_velocities(spec, positions, eps, rng)?;
        if let Some(c) = conditioning {
            if free_flow_contact(&config.particles, eps, c.delta, Side::Plus) {
                continue;
            }
        }
        return Ok(GrandCanonicalSample {
            n,
            config,
            accepted_after: attempt,
        });
    }
    Err(SampleError::RejectionBudgetExceeded {
        attempts: REJECTION_BUDGET,
    })
}

/// Reference Gaussian used for envelope and proposal computations.
pub fn gaussian(beta: f64) -> Normal<f64> {
    Normal::new(0.0, 1.0 / beta.sqrt()).expect("positive beta")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::simulate;
    use crate::stats::{chi_square_p_value, RunningStats};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal as StNormal};

    #[test]
    fn natural_mu_values() {
        let m = DensitySpec::maxwellian(1.0);
        assert!((m.mu(2) - (2.0 * PI).ln()).abs() < 1e-12);
        assert!(m.check_envelope::<2>().unwrap() <= 1.0 + 1e-12);
        assert!((m.envelope_probe::<2>() - 1.0).abs() < 1e-12);
        let tb = DensitySpec::two_bump(1.0, 1.0, 0.6);
        let r = tb.check_envelope::<2>().unwrap();
        assert!(r > 0.9 && r <= 1.0 + 1e-12, "{r}");
        let tb3 = DensitySpec::two_bump(1.0, 1.0, 0.6);
        assert!(tb3.check_envelope::<3>().unwrap() <= 1.0 + 1e-12);
        // a larger mu than the supremum allows is caught by the probe
        let bad = DensitySpec::maxwellian(1.0).with_mu(2.5);
        assert!(matches!(bad.check_envelope::<2>(), Err(SampleError::EnvelopeViolated { .. })));
        assert!(DensitySpec::two_bump(3.0, 1.0, 0.6).validate(2).is_err());
    }

    #[test]
    fn maxwellian_second_moment() {
        let spec = DensitySpec::maxwellian(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = RunningStats::new();
        for _ in 0..100_000 {
            s.push(spec.sample_velocity::<2, _>(&mut rng).unwrap().norm_sq());
        }
        assert!(s.estimate().consistent_with(2.0, 3.0));
    }

    fn first_component_chi_square(spec: &DensitySpec, draws: &[f64]) -> f64 {
        // exact bin probabilities of the first velocity component from normal CDFs
        let edges: Vec<f64> = (0..=40).map(|k| -4.0 + 0.2 * k as f64).collect();
        let cdf = |x: f64| match spec.form {
            VelocityForm::Maxwellian => StNormal::new(0.0, 1.0 / spec.beta.sqrt()).unwrap().cdf(x),
            VelocityForm::TwoBump { shift, width } => {
                0.5 * (StNormal::new(shift, width).unwrap().cdf(x) + StNormal::new(-shift, width).unwrap().cdf(x))
            }
            VelocityForm::Custom(_) => unreachable!(),
        };
        let n = draws.len() as f64;
        let mut observed = vec![0.0; edges.len() + 1];
        let mut expected = vec![0.0; edges.len() + 1];
        for &x in draws {
            let k = edges.partition_point(|&e| e <= x);
            observed[k] += 1.0;
        }
        for k in 0..=edges.len() {
            let lo = if k == 0 { f64::NEG_INFINITY } else { edges[k - 1] };
            let hi = if k == edges.len() { f64::INFINITY } else { edges[k] };
            expected[k] = n * (cdf(hi) - cdf(lo));
        }
        chi_square_p_value(&observed, &expected)
    }

    #[test]
    fn two_bump_histogram_fits() {
        let spec = DensitySpec::two_bump(1.0, 1.0, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| spec.sample_velocity::<2, _>(&mut rng).unwrap()[0])
            .collect();
        assert!(first_component_chi_square(&spec, &draws) > 0.01);
    }

    #[test]
    fn custom_form_rejection_matches_two_bump() {
        let reference = DensitySpec::two_bump(1.0, 1.0, 0.6);
        let mu = reference.mu(2);
        let r = reference.clone();
        let custom = DensitySpec::custom(
            1.0,
            mu,
            Arc::new(move |v: &[f64]| r.velocity_density(&Vector::<2>::from_slice(v).unwrap())),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws: Vec<f64> = (0..50_000)
            .map(|_| custom.sample_velocity::<2, _>(&mut rng).unwrap()[0])
            .collect();
        assert!(first_component_chi_square(&reference, &draws) > 0.01);

        let too_big = DensitySpec::custom(1.0, mu + 1.0, custom_fn(reference));
        let err = (0..1000).find_map(|_| too_big.sample_velocity::<2, _>(&mut rng).err());
        assert!(matches!(err, Some(SampleError::EnvelopeViolated { .. })));
    }

    fn custom_fn(reference: DensitySpec) -> VelocityDensityFn {
        Arc::new(move |v: &[f64]| reference.velocity_density(&Vector::<2>::from_slice(v).unwrap()))
    }

    #[test]
    fn partition_function_two_particles() {
        let spec = DensitySpec::maxwellian(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z1 = estimate_partition_function::<2, _>(&spec, 1, 0.1, 10, &mut rng).unwrap();
        assert_eq!(z1.value, 1.0);
        let z2 = estimate_partition_function::<2, _>(&spec, 2, 0.1, 100_000, &mut rng).unwrap();
        assert!(z2.consistent_with(1.0 - PI * 0.01, 3.0), "{z2:?}");
        let z3 = estimate_partition_function::<2, _>(&spec, 3, 0.1, 100_000, &mut rng).unwrap();
        assert!(z3.value <= z2.value + 3.0 * (z2.stderr + z3.stderr));
    }

    #[test]
    fn single_particle_accepts_immediately() {
        let spec = DensitySpec::maxwellian(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, attempts) =
            sample_factorized_counted::<2, _>(&spec, 1, 0.1, SamplingMethod::GlobalRejection, &mut rng).unwrap();
        assert_eq!((c.len(), attempts), (1, 1));
    }

    /// Fraction of pairs at torus distance below `r` over an ensemble.
    fn pair_fraction_below(configs: &[Configuration<2>], r: f64) -> Estimate {
        let mut s = RunningStats::new();
        for c in configs {
            let n = c.len();
            let mut close = 0usize;
            for i in 0..n {
                for j in i + 1..n {
                    close += usize::from(torus_distance(&c.particles[i].x, &c.particles[j].x) < r);
                }
            }
            s.push(close as f64 / (n * (n - 1) / 2) as f64);
        }
        s.estimate()
    }

    #[test]
    fn samplers_agree_on_pair_distances() {
        let spec = DensitySpec::maxwellian(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = 0.12;
        let exact: Vec<_> = (0..4000)
            .map(|_| sample_factorized::<2, _>(&spec, 8, eps, SamplingMethod::GlobalRejection, &mut rng).unwrap())
            .collect();
        let chain: Vec<_> = (0..4000)
            .map(|_| {
                sample_factorized::<2, _>(
                    &spec,
                    8,
                    eps,
                    SamplingMethod::MarkovChain { burn_in_sweeps: Some(20) },
                    &mut rng,
                )
                .unwrap()
            })
            .collect();
        for c in exact.iter().chain(&chain) {
            assert!(c.min_pair_distance() > eps);
        }
        for r in [0.15, 0.2, 0.3] {
            let a = pair_fraction_below(&exact, r);
            let b = pair_fraction_below(&chain, r);
            let tol = 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
            assert!((a.value - b.value).abs() <= tol, "r={r}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn grand_canonical_mean_count() {
        let spec = DensitySpec::maxwellian(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // tiny eps: exclusion almost never rejects, so counts follow the Poisson proposal
        let eps = 1e-3;
        let activity = 20.0;
        let mut s = RunningStats::new();
        for _ in 0..20_000 {
            let g = sample_grand_canonical_with_activity::<2, _>(&spec, eps, activity, None, &mut rng).unwrap();
            s.push(g.n as f64);
        }
        assert!((s.mean() - activity).abs() < 3.0 * s.estimate().stderr + 0.05);
        assert_eq!(boltzmann_grad_activity(0.02, 2), 50.0);
    }

    #[test]
    fn conditioned_samples_are_collision_free() {
        let spec = DensitySpec::maxwellian(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cond = ConditioningSpec { delta: 0.05 };
        for _ in 0..50 {
            let g = sample_grand_canonical::<2, _>(&spec, 0.05, Some(&cond), &mut rng).unwrap();
            let (_, log) = simulate(&g.config, cond.delta).unwrap();
            assert!(log.events.is_empty());
        }
    }
}
