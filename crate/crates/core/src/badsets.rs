//! Configurations whose free flow brings two particles close within a time horizon, and
//! Monte Carlo estimates of how much phase space they occupy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::draw::{uniform_in_ball, uniform_position, unit_vector};
use crate::seeding::sharded;
use crate::sim::{simulate, Configuration, SimError};
use crate::stats::{binomial_stderr, Estimate};
use crate::torus::{closest_approach, minimal_image, scatter_unchecked, torus_distance, ParticleState};
use crate::vector::Vector;

#[derive(Debug, Error)]
pub enum BadSetError {
    #[error("particle {index} has speed {speed} above the cutoff {cutoff}")]
    VelocityOutOfRange { index: usize, speed: f64, cutoff: f64 },
    #[error("base configuration is already in the backward bad set")]
    BadBaseConfiguration,
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

/// Direction of the free flow probed by a bad set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Forward flow `x + u v`.
    Plus,
    /// Backward flow `x - u v`.
    Minus,
}

impl Side {
    pub fn label(self) -> &'static str {
        match self {
            Side::Plus => "plus",
            Side::Minus => "minus",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BadSetSpec {
    pub n: usize,
    pub eps0: f64,
    pub velocity_cutoff: f64,
    pub horizon: f64,
    pub side: Side,
}

impl BadSetSpec {
    fn validate(&self) -> Result<(), BadSetError> {
        if !(self.eps0 > 0.0 && self.velocity_cutoff > 0.0 && self.horizon > 0.0) {
            return Err(BadSetError::InvalidParameters(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeasureEstimate {
    pub fraction: f64,
    pub stderr: f64,
    pub samples: usize,
    pub spec: BadSetSpec,
}

impl MeasureEstimate {
    fn from_count(hits: usize, samples: usize, spec: BadSetSpec) -> Self {
        let fraction = hits as f64 / samples as f64;
        Self {
            fraction,
            stderr: binomial_stderr(fraction, samples),
            samples,
            spec,
        }
    }

    pub fn csv_header() -> &'static str {
        "eps0,sign,n,R,T,fraction,stderr,samples"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:e},{:e},{}",
            self.spec.eps0,
            self.spec.side.label(),
            self.spec.n,
            self.spec.velocity_cutoff,
            self.spec.horizon,
            self.fraction,
            self.stderr,
            self.samples
        )
    }
}

/// Smallest torus distance between particles `i` and `j` along the free flow on `[0, horizon]`.
pub fn pair_closest_approach<const D: usize>(
    zi: &ParticleState<D>,
    zj: &ParticleState<D>,
    horizon: f64,
    side: Side,
    search_radius: f64,
) -> f64 {
    let r0 = minimal_image(&zj.x, &zi.x);
    let w = match side {
        Side::Plus => zj.v - zi.v,
        Side::Minus => zi.v - zj.v,
    };
    closest_approach(&r0, &w, search_radius, horizon)
}

/// Smallest pair distance along the free flow, or `f64::INFINITY` for fewer than two
/// particles. Values above `search_radius` are only lower bounds on the true minimum.
pub fn min_free_approach<const D: usize>(
    particles: &[ParticleState<D>],
    horizon: f64,
    side: Side,
    search_radius: f64,
) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..particles.len() {
        for j in i + 1..particles.len() {
            let d = pair_closest_approach(&particles[i], &particles[j], horizon, side, search_radius);
            best = best.min(d);
        }
    }
    best
}

/// True if some pair comes within `radius` under the free flow on `[0, horizon]`.
pub fn free_flow_contact<const D: usize>(
    particles: &[ParticleState<D>],
    radius: f64,
    horizon: f64,
    side: Side,
) -> bool {
    for i in 0..particles.len() {
        for j in i + 1..particles.len() {
            if pair_closest_approach(&particles[i], &particles[j], horizon, side, radius) <= radius {
                return true;
            }
        }
    }
    false
}

fn check_velocities<const D: usize>(particles: &[ParticleState<D>], cutoff: f64) -> Result<(), BadSetError> {
    for (index, z) in particles.iter().enumerate() {
        let speed = z.v.norm();
        if speed > cutoff {
            return Err(BadSetError::VelocityOutOfRange { index, speed, cutoff });
        }
    }
    Ok(())
}

/// Membership of a configuration in the bad set described by `spec`. Exclusion is not required.
pub fn in_bad_set<const D: usize>(particles: &[ParticleState<D>], spec: &BadSetSpec) -> Result<bool, BadSetError> {
    spec.validate()?;
    check_velocities(particles, spec.velocity_cutoff)?;
    Ok(free_flow_contact(particles, spec.eps0, spec.horizon, spec.side))
}

/// Uniform draw from `(T^D x B_R)^n`.
pub fn uniform_state<const D: usize, R: Rng + ?Sized>(n: usize, cutoff: f64, rng: &mut R) -> Vec<ParticleState<D>> {
    (0..n)
        .map(|_| ParticleState {
            x: uniform_position(rng),
            v: uniform_in_ball(cutoff, rng),
        })
        .collect()
}

/// Fraction of `(T^D x B_R)^n`, under the uniform measure, occupied by the bad set.
pub fn estimate_measure<const D: usize>(
    spec: &BadSetSpec,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<MeasureEstimate, BadSetError> {
    spec.validate()?;
    let hits: usize = sharded(samples, rng, |count, local| {
        (0..count)
            .filter(|_| {
                let z = uniform_state::<D, _>(spec.n, spec.velocity_cutoff, local);
                free_flow_contact(&z, spec.eps0, spec.horizon, spec.side)
            })
            .count()
    })
    .into_iter()
    .sum();
    Ok(MeasureEstimate::from_count(hits, samples, *spec))
}

/// Joint sweep using common random numbers: one set of uniform samples is tested against
/// every radius in `eps0_list` and both sides.
#[derive(Clone, Debug, Serialize)]
pub struct BadSetSweep {
    pub plus: Vec<MeasureEstimate>,
    pub minus: Vec<MeasureEstimate>,
    /// Intersection of the forward and backward sets, one entry per radius.
    pub both: Vec<Estimate>,
}

pub fn estimate_sweep<const D: usize>(
    eps0_list: &[f64],
    template: &BadSetSpec,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<BadSetSweep, BadSetError> {
    template.validate()?;
    if eps0_list.iter().any(|&e| !(e > 0.0)) {
        return Err(BadSetError::InvalidParameters("eps0 must be positive".into()));
    }
    let k = eps0_list.len();
    let radius = eps0_list.iter().copied().fold(0.0, f64::max);
    let counts = sharded(samples, rng, |count, local| {
        let mut plus = vec![0usize; k];
        let mut minus = vec![0usize; k];
        let mut both = vec![0usize; k];
        for _ in 0..count {
            let z = uniform_state::<D, _>(template.n, template.velocity_cutoff, local);
            let dp = min_free_approach(&z, template.horizon, Side::Plus, radius);
            let dm = min_free_approach(&z, template.horizon, Side::Minus, radius);
            for (idx, &e) in eps0_list.iter().enumerate() {
                let p = dp <= e;
                let m = dm <= e;
                plus[idx] += usize::from(p);
                minus[idx] += usize::from(m);
                both[idx] += usize::from(p && m);
            }
        }
        (plus, minus, both)
    });
    let mut plus = vec![0usize; k];
    let mut minus = vec![0usize; k];
    let mut both = vec![0usize; k];
    for (p, m, b) in counts {
        for idx in 0..k {
            plus[idx] += p[idx];
            minus[idx] += m[idx];
            both[idx] += b[idx];
        }
    }
    let spec_for = |e: f64, side: Side| BadSetSpec {
        eps0: e,
        side,
        ..*template
    };
    Ok(BadSetSweep {
        plus: (0..k)
            .map(|i| MeasureEstimate::from_count(plus[i], samples, spec_for(eps0_list[i], Side::Plus)))
            .collect(),
        minus: (0..k)
            .map(|i| MeasureEstimate::from_count(minus[i], samples, spec_for(eps0_list[i], Side::Minus)))
            .collect(),
        both: (0..k)
            .map(|i| {
                let f = both[i] as f64 / samples as f64;
                Estimate {
                    value: f,
                    stderr: binomial_stderr(f, samples),
                    samples,
                }
            })
            .collect(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MonotonicityReport {
    pub pass: bool,
    pub estimates: Vec<MeasureEstimate>,
}

/// Checks that estimated measures do not decrease with the radius, within three standard errors.
pub fn monotonicity_check<const D: usize>(
    eps0_list: &[f64],
    template: &BadSetSpec,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<MonotonicityReport, BadSetError> {
    if eps0_list.windows(2).any(|w| w[1] < w[0]) {
        return Err(BadSetError::InvalidParameters("radii must be ascending".into()));
    }
    let sweep = estimate_sweep::<D>(eps0_list, template, samples, rng)?;
    let estimates = match template.side {
        Side::Plus => sweep.plus,
        Side::Minus => sweep.minus,
    };
    let pass = estimates.windows(2).all(|w| {
        let tol = 3.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        w[1].fraction >= w[0].fraction - tol
    });
    Ok(MonotonicityReport { pass, estimates })
}

/// Outcome frequencies of adjoining one particle to a good configuration and following the
/// enlarged system backward.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RecollisionEstimate {
    /// Overlap at adjunction or a hard-sphere collision during the backward flow.
    pub recollision: Estimate,
    /// No recollision, but the state after backward time `delta` is in the backward bad set
    /// with radius `eps0 / 2` over the remaining horizon.
    pub left_good_set: Estimate,
    /// Either of the two.
    pub combined: Estimate,
}

#[derive(Clone, Copy, Debug)]
pub struct AdjunctionSpec {
    pub eps: f64,
    pub eps0: f64,
    pub delta: f64,
    pub velocity_cutoff: f64,
    pub horizon: f64,
}

pub fn estimate_recollision_probability<const D: usize>(
    base: &Configuration<D>,
    attach_to: usize,
    spec: &AdjunctionSpec,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<RecollisionEstimate, BadSetError> {
    if attach_to >= base.len() || !(spec.delta > 0.0 && spec.delta <= spec.horizon) {
        return Err(BadSetError::InvalidParameters(format!(
            "attach_to {attach_to} with {} particles, delta {} horizon {}",
            base.len(),
            spec.delta,
            spec.horizon
        )));
    }
    if free_flow_contact(&base.particles, spec.eps0, spec.horizon, Side::Minus) {
        return Err(BadSetError::BadBaseConfiguration);
    }
    let eps = spec.eps;
    let shard_counts = sharded(samples, rng, |count, local| -> Result<(usize, usize), BadSetError> {
        let mut recollide = 0;
        let mut left = 0;
        for _ in 0..count {
            let nu: Vector<D> = unit_vector(local);
            let v_new: Vector<D> = uniform_in_ball(spec.velocity_cutoff, local);
            let anchor = base.particles[attach_to];
            let mut particles = base.particles.clone();
            let mut added = ParticleState::new(anchor.x + nu * eps, v_new);
            if (v_new - anchor.v).dot(&nu) > 0.0 {
                let (vm, vn) = scatter_unchecked(&anchor.v, &v_new, &nu);
                particles[attach_to].v = vm;
                added.v = vn;
            }
            let overlap = particles
                .iter()
                .enumerate()
                .any(|(k, p)| k != attach_to && torus_distance(&p.x, &added.x) < eps);
            particles.push(added);
            if overlap {
                recollide += 1;
                continue;
            }
            let config = Configuration::new_unchecked(particles, eps);
            let (_, log) = simulate(&config.reverse_velocities(), spec.horizon)?;
            if !log.events.is_empty() {
                recollide += 1;
                continue;
            }
            let shifted: Vec<ParticleState<D>> = config
                .particles
                .iter()
                .map(|z| crate::torus::free_flight(z, -spec.delta))
                .collect();
            if free_flow_contact(&shifted, spec.eps0 / 2.0, spec.horizon - spec.delta, Side::Minus) {
                left += 1;
            }
        }
        Ok((recollide, left))
    });
    let (mut recollide, mut left) = (0, 0);
    for r in shard_counts {
        let (a, b) = r?;
        recollide += a;
        left += b;
    }
    let est = |hits: usize| {
        let f = hits as f64 / samples as f64;
        Estimate {
            value: f,
            stderr: binomial_stderr(f, samples),
            samples,
        }
    };
    Ok(RecollisionEstimate {
        recollision: est(recollide),
        left_good_set: est(left),
        combined: est(recollide + left),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::free_flight;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(side: Side, eps0: f64, horizon: f64) -> BadSetSpec {
        BadSetSpec {
            n: 2,
            eps0,
            velocity_cutoff: 10.0,
            horizon,
            side,
        }
    }

    #[test]
    fn documented_pair() {
        let z = [
            ParticleState::new([0.0, 0.0], [1.0, 0.0]),
            ParticleState::new([0.3, 0.0], [0.0, 0.0]),
        ];
        assert!(in_bad_set(&z, &spec(Side::Plus, 0.1, 0.5)).unwrap());
        assert!(!in_bad_set(&z, &spec(Side::Minus, 0.1, 0.5)).unwrap());
        let dm = min_free_approach(&z, 0.5, Side::Minus, 0.5);
        assert!((dm - 0.2).abs() < 1e-12);
    }

    #[test]
    fn trivial_cases() {
        let one = [ParticleState::new([0.1, 0.1], [3.0, 0.0])];
        assert!(!in_bad_set(&one, &spec(Side::Plus, 0.4, 1.0)).unwrap());
        let parallel = [
            ParticleState::new([0.1, 0.1], [1.0, 2.0]),
            ParticleState::new([0.6, 0.4], [1.0, 2.0]),
        ];
        assert!(!in_bad_set(&parallel, &spec(Side::Plus, 0.1, 5.0)).unwrap());
        assert!(!in_bad_set(&parallel, &spec(Side::Minus, 0.1, 5.0)).unwrap());
        assert!(matches!(
            in_bad_set(&parallel, &BadSetSpec { velocity_cutoff: 1.0, ..spec(Side::Plus, 0.1, 1.0) }),
            Err(BadSetError::VelocityOutOfRange { .. })
        ));
    }

    #[test]
    fn agrees_with_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let eps0 = 0.05;
        let horizon = 0.5;
        let mut disagreements = 0;
        for _ in 0..10_000 {
            let z = uniform_state::<2, _>(2, 2.0, &mut rng);
            for side in [Side::Plus, Side::Minus] {
                let sign = if side == Side::Plus { 1.0 } else { -1.0 };
                let mut min_d = f64::INFINITY;
                for k in 0..=5000 {
                    let u = sign * k as f64 * 1e-4;
                    let d = torus_distance(&free_flight(&z[0], u).x, &free_flight(&z[1], u).x);
                    min_d = min_d.min(d);
                }
                let exact = pair_closest_approach(&z[0], &z[1], horizon, side, 1.0);
                assert!(exact <= min_d + 1e-12);
                // the grid can only overestimate the minimum, by at most |w| * step / 2
                let slack = (z[0].v - z[1].v).norm() * 0.5e-4;
                assert!(min_d - exact <= slack + 1e-12);
                let member = in_bad_set(&z, &spec(side, eps0, horizon)).unwrap();
                if member != (min_d <= eps0 + 1e-3 * eps0) && (min_d - eps0).abs() > 1e-3 * eps0 {
                    disagreements += 1;
                }
            }
        }
        assert_eq!(disagreements, 0);
    }

    #[test]
    fn reversal_duality_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let z = uniform_state::<2, _>(3, 2.0, &mut rng);
            let flipped: Vec<_> = z.iter().map(|p| ParticleState { x: p.x, v: -p.v }).collect();
            let a = in_bad_set(&z, &spec(Side::Minus, 0.05, 0.5)).unwrap();
            let b = in_bad_set(&flipped, &spec(Side::Plus, 0.05, 0.5)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nesting_in_radius_is_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let z = uniform_state::<2, _>(2, 2.0, &mut rng);
            let mut prev = false;
            for eps0 in [0.005, 0.01, 0.02, 0.04] {
                let now = in_bad_set(&z, &spec(Side::Minus, eps0, 0.5)).unwrap();
                assert!(!prev || now);
                prev = now;
            }
        }
    }

    #[test]
    fn saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = estimate_measure::<2>(&spec(Side::Plus, 0.8, 1e-6), 10_000, &mut rng).unwrap();
        assert_eq!(est.fraction, 1.0);
    }

    #[test]
    fn recollision_static_limit() {
        let base = Configuration::new(vec![ParticleState::new([0.5, 0.5], [0.0, 0.0])], 0.01).unwrap();
        let spec = AdjunctionSpec {
            eps: 0.01,
            eps0: 0.05,
            delta: 0.05,
            velocity_cutoff: 1e-12,
            horizon: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = estimate_recollision_probability(&base, 0, &spec, 2000, &mut rng).unwrap();
        assert_eq!(est.recollision.value, 0.0);
    }

    #[test]
    fn bad_base_is_rejected() {
        let base = Configuration::new(
            vec![
                ParticleState::new([0.5, 0.5], [1.0, 0.0]),
                ParticleState::new([0.4, 0.5], [0.0, 0.0]),
            ],
            0.01,
        )
        .unwrap();
        let spec = AdjunctionSpec {
            eps: 0.01,
            eps0: 0.05,
            delta: 0.05,
            velocity_cutoff: 2.0,
            horizon: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            estimate_recollision_probability(&base, 0, &spec, 10, &mut rng),
            Err(BadSetError::BadBaseConfiguration)
        ));
    }
}
