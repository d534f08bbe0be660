//! Short-time convergence bound of the collision series.
//!
//! The loss term of the hierarchy applied to `exp(-mu - beta |v|^2 / 2)` per particle is
//! bounded by `C_loss e^{-mu} beta^{-(d+1)/2}` times the particle count, with
//! `C_loss = 2 c_d (2 pi)^{d/2} max(1, m_d)`: the factor 2 counts gain and loss, `c_d` is the
//! angular integral of `(e·nu)_+`, `(2 pi)^{d/2} beta^{-d/2}` is the Gaussian mass and
//! `m_d beta^{-1/2}` is the mean speed of a unit Gaussian. `lambda` is that constant times a
//! caller-chosen margin, and the series converges for `lambda t < beta / 2`.

use serde::Serialize;

use super::homogeneous::SolverError;
use crate::vector::positive_cosine_integral;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LanfordBound {
    pub t_star: f64,
    pub lambda: f64,
    pub loss_constant: f64,
}

/// Mean of `|g|` for a standard Gaussian in `dim` dimensions.
fn gaussian_mean_speed(dim: usize) -> f64 {
    use statrs::function::gamma::gamma;
    std::f64::consts::SQRT_2 * gamma((dim as f64 + 1.0) / 2.0) / gamma(dim as f64 / 2.0)
}

pub fn loss_constant(dim: usize) -> f64 {
    2.0 * positive_cosine_integral(dim)
        * (2.0 * std::f64::consts::PI).powf(dim as f64 / 2.0)
        * gaussian_mean_speed(dim).max(1.0)
}

pub fn lanford_time(dim: usize, beta: f64, mu: f64, lambda_margin: f64) -> Result<LanfordBound, SolverError> {
    if !(beta > 0.0 && beta.is_finite() && mu.is_finite() && lambda_margin > 0.0 && dim >= 2) {
        return Err(SolverError::InvalidParameters(format!(
            "beta = {beta}, mu = {mu}, margin = {lambda_margin}, dim = {dim}"
        )));
    }
    let c = loss_constant(dim);
    let lambda = lambda_margin * c * (-mu).exp() * beta.powf(-(dim as f64 + 1.0) / 2.0);
    Ok(LanfordBound {
        t_star: t_star_for(beta, lambda),
        lambda,
        loss_constant: c,
    })
}

/// `t*` for an explicitly chosen `lambda`.
pub fn t_star_for(beta: f64, lambda: f64) -> f64 {
    beta / (2.0 * lambda)
}

/// Per-collision factor `beta^{-(d+1)/2} t / (beta - beta_tilde)` of the iterated estimate.
pub fn iterated_bound_factor(dim: usize, beta: f64, beta_tilde: f64, t: f64) -> Result<f64, SolverError> {
    if !(beta > 0.0 && beta_tilde < beta && t >= 0.0) {
        return Err(SolverError::InvalidParameters(format!(
            "beta = {beta}, beta_tilde = {beta_tilde}, t = {t}"
        )));
    }
    Ok(beta.powf(-(dim as f64 + 1.0) / 2.0) * t / (beta - beta_tilde))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_factor() {
        assert!((iterated_bound_factor(2, 1.0, 0.5, 0.25).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scalings() {
        let a = lanford_time(2, 1.0, 0.3, 1.0).unwrap();
        let b = lanford_time(2, 1.0, 0.3, 2.0).unwrap();
        assert!((a.t_star / b.t_star - 2.0).abs() < 1e-12);
        assert!((t_star_for(3.0, 1.5) / t_star_for(1.0, 1.5) - 3.0).abs() < 1e-12);
        assert!(lanford_time(2, -1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn mean_speeds() {
        assert!((gaussian_mean_speed(2) - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);
        assert!((gaussian_mean_speed(3) - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }
}
