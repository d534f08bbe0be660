//! Geometry and two-body mechanics on the periodic unit box `T^D = [0,1)^D`.

use thiserror::Error;

use crate::vector::Vector;

/// Absolute tolerance on distances when checking contact and overlap.
pub const CONTACT_TOL: f64 = 1e-12;
/// Tolerance on `| |nu| - 1 |` accepted by [`scatter`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TorusError {
    #[error("initial overlap: torus distance {distance} below diameter {eps}")]
    InitialOverlap { distance: f64, eps: f64 },
    #[error("impact direction has norm {norm}, expected 1")]
    NonUnitNormal { norm: f64 },
}

/// Position and velocity of one particle.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParticleState<const D: usize> {
    pub x: Vector<D>,
    pub v: Vector<D>,
}

impl<const D: usize> ParticleState<D> {
    pub fn new(x: impl Into<Vector<D>>, v: impl Into<Vector<D>>) -> Self {
        Self {
            x: wrap_position(x.into()),
            v: v.into(),
        }
    }
}

/// A contact between two particles: when it happens and along which direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contact<const D: usize> {
    pub time: f64,
    /// Unit vector from the first particle's center toward the second's at contact.
    pub nu: Vector<D>,
}

#[inline]
fn wrap_unit(c: f64) -> f64 {
    let r = c - c.floor();
    // c - floor(c) rounds to 1.0 for tiny negative c
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Reduces every coordinate into `[0, 1)`.
#[inline]
pub fn wrap_position<const D: usize>(x: Vector<D>) -> Vector<D> {
    x.map(wrap_unit)
}

/// Representative of `a - b (mod 1)` with every coordinate in `[-1/2, 1/2)`.
#[inline]
pub fn minimal_image<const D: usize>(a: &Vector<D>, b: &Vector<D>) -> Vector<D> {
    let mut r = *a - *b;
    for k in 0..D {
        r[k] -= (r[k] + 0.5).floor();
    }
    r
}

#[inline]
pub fn torus_distance<const D: usize>(a: &Vector<D>, b: &Vector<D>) -> f64 {
    minimal_image(a, b).norm()
}

/// Free transport for a (possibly negative) time `t`.
#[inline]
pub fn free_flight<const D: usize>(z: &ParticleState<D>, t: f64) -> ParticleState<D> {
    ParticleState {
        x: wrap_position(z.x + z.v * t),
        v: z.v,
    }
}

/// Integer lattice offsets `k` for which the segment `r0 + k + u w`, `u ∈ [0, horizon]`,
/// can come within `radius` of the origin. Axes are resolved one at a time on the
/// sub-interval of `u` where the previous coordinates stay within `radius`, so the count
/// grows linearly with the length of the segment rather than with its bounding box.
pub(crate) fn image_offsets<const D: usize>(
    r0: &Vector<D>,
    w: &Vector<D>,
    radius: f64,
    horizon: f64,
) -> Vec<Vector<D>> {
    let mut out = Vec::new();
    collect_offsets(r0, w, radius + 1e-12, 0, (0.0, horizon), &mut [0.0; D], &mut out);
    out
}

fn collect_offsets<const D: usize>(
    r0: &Vector<D>,
    w: &Vector<D>,
    slack: f64,
    axis: usize,
    (u_lo, u_hi): (f64, f64),
    prefix: &mut [f64; D],
    out: &mut Vec<Vector<D>>,
) {
    let (c_lo, c_hi) = (r0[axis] + w[axis] * u_lo, r0[axis] + w[axis] * u_hi);
    let (min_c, max_c) = if c_hi < c_lo { (c_hi, c_lo) } else { (c_lo, c_hi) };
    let lo = (-max_c - slack).ceil() as i64;
    let hi = (-min_c + slack).floor() as i64;
    for k in lo..=hi {
        prefix[axis] = k as f64;
        if axis + 1 == D {
            out.push(Vector(*prefix));
            continue;
        }
        let sub = if w[axis] == 0.0 {
            (u_lo, u_hi)
        } else {
            let a = (-slack - r0[axis] - k as f64) / w[axis];
            let b = (slack - r0[axis] - k as f64) / w[axis];
            (a.min(b).max(u_lo), a.max(b).min(u_hi))
        };
        if sub.0 <= sub.1 {
            collect_offsets(r0, w, slack, axis + 1, sub, prefix, out);
        }
    }
}

/// Earliest `t ∈ [0, t_max]` with `|r0 + k + t w| = eps` while approaching, over all images `k`.
///
/// `r0` is the minimal-image displacement from particle 1 to particle 2 and `w = v2 - v1`.
pub(crate) fn relative_contact<const D: usize>(
    r0: &Vector<D>,
    w: &Vector<D>,
    eps: f64,
    t_max: f64,
) -> Option<Contact<D>> {
    let a = w.norm_sq();
    if a == 0.0 || t_max <= 0.0 {
        return None;
    }
    let mut best: Option<(f64, Vector<D>)> = None;
    for k in image_offsets(r0, w, eps, t_max) {
        let r = *r0 + k;
        let b = r.dot(w);
        if b >= 0.0 {
            continue;
        }
        let c = r.norm_sq() - eps * eps;
        let disc = b * b - a * c;
        if disc < 0.0 {
            continue;
        }
        // smaller root of a t^2 + 2 b t + c, written to avoid cancellation
        let t = if c <= 0.0 { 0.0 } else { c / (-b + disc.sqrt()) };
        if t <= t_max && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, r));
        }
    }
    best.map(|(time, r)| {
        let at_contact = r + *w * time;
        let nu = at_contact.normalized().unwrap_or_else(|| Vector::unit(0));
        Contact { time, nu }
    })
}

/// First time in `(0, t_max]` at which two freely moving spheres of diameter `eps` touch
/// while approaching, searching all periodic images reachable within `t_max`.
pub fn pair_collision_time<const D: usize>(
    z1: &ParticleState<D>,
    z2: &ParticleState<D>,
    eps: f64,
    t_max: f64,
) -> Result<Option<Contact<D>>, TorusError> {
    let r0 = minimal_image(&z2.x, &z1.x);
    let distance = r0.norm();
    if distance < eps - CONTACT_TOL {
        return Err(TorusError::InitialOverlap { distance, eps });
    }
    Ok(relative_contact(&r0, &(z2.v - z1.v), eps, t_max))
}

/// Minimum over `u ∈ [0, horizon]` and all images of `|r0 + k + u w|`.
pub(crate) fn closest_approach<const D: usize>(
    r0: &Vector<D>,
    w: &Vector<D>,
    radius: f64,
    horizon: f64,
) -> f64 {
    let a = w.norm_sq();
    let mut best = f64::INFINITY;
    for k in image_offsets(r0, w, radius, horizon) {
        let r = *r0 + k;
        let u = if a > 0.0 {
            (-r.dot(w) / a).clamp(0.0, horizon)
        } else {
            0.0
        };
        let d = (r + *w * u).norm();
        if d < best {
            best = d;
        }
    }
    best
}

/// Elastic scattering of a pair: the normal component of the relative velocity along `nu`
/// is exchanged. Preserves momentum and kinetic energy and is an involution.
pub fn scatter<const D: usize>(
    v_i: &Vector<D>,
    v_j: &Vector<D>,
    nu: &Vector<D>,
) -> Result<(Vector<D>, Vector<D>), TorusError> {
    let norm = nu.norm();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(TorusError::NonUnitNormal { norm });
    }
    Ok(scatter_unchecked(v_i, v_j, nu))
}

#[inline]
pub(crate) fn scatter_unchecked<const D: usize>(
    v_i: &Vector<D>,
    v_j: &Vector<D>,
    nu: &Vector<D>,
) -> (Vector<D>, Vector<D>) {
    let exchange = (*v_i - *v_j).dot(nu);
    (*v_i - *nu * exchange, *v_j + *nu * exchange)
}
