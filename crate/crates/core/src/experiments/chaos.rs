use serde::{Deserialize, Serialize};

use super::common::{
    check_scaling, factorized_ensemble, phase_cell_weights, require, scaled_diameter, separated_pairs, simulate_ensemble,
    DensityConfig, PhaseGridConfig,
};
use super::{Context, ExperimentError};
use crate::observables::{chaos_defect, ChaosDefect, MarginalOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChaosParams {
    pub density: DensityConfig,
    pub particles: Vec<usize>,
    /// Explicit diameters, one per entry of `particles`; empty means `N eps^{d-1} = 1`.
    pub eps: Vec<f64>,
    pub replicas: usize,
    pub tau: f64,
    pub grid: PhaseGridConfig,
    pub probe_pairs: usize,
}

impl Default for ChaosParams {
    fn default() -> Self {
        Self {
            density: DensityConfig::default(),
            particles: vec![64, 128, 256],
            eps: vec![],
            replicas: 1000,
            tau: 0.05,
            grid: PhaseGridConfig::new(4, 4, Some(3.0)),
            probe_pairs: 200,
        }
    }
}

impl ChaosParams {
    pub(super) fn checked(self, dim: usize, warnings: &mut Vec<String>) -> Result<Self, ExperimentError> {
        self.density.check(dim)?;
        self.grid.check("grid")?;
        require(!self.particles.is_empty() && self.particles.iter().all(|&n| n >= 2), || "particles needs entries >= 2".into())?;
        require(self.eps.is_empty() || self.eps.len() == self.particles.len(), || "eps must match particles".into())?;
        require(self.replicas >= 10 && self.probe_pairs >= 1 && self.tau >= 0.0, || "replicas >= 10, probe_pairs >= 1, tau >= 0".into())?;
        for (k, &n) in self.particles.iter().enumerate() {
            check_scaling(n, self.diameter(k, dim), dim, warnings);
        }
        Ok(self)
    }

    fn diameter(&self, k: usize, dim: usize) -> f64 {
        self.eps.get(k).copied().unwrap_or_else(|| scaled_diameter(self.particles[k], dim))
    }
}

fn nonincreasing(defects: &[&ChaosDefect]) -> (bool, f64) {
    let mut worst = f64::NEG_INFINITY;
    for w in defects.windows(2) {
        let (a, b) = (w[0].max_abs, w[1].max_abs);
        let sigma = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        let excess = if sigma > 0.0 { (b.value - a.value) / sigma } else { (b.value - a.value).signum() * f64::INFINITY };
        worst = worst.max(excess);
    }
    (worst <= 3.0, worst)
}

pub(super) fn run<const D: usize>(p: &ChaosParams, ctx: &mut Context) -> Result<(), ExperimentError> {
    let spec = p.density.spec();
    let cells = p.grid.grid::<D>(spec.beta);
    let weights = phase_cell_weights(&spec, &cells);
    let largest_eps = (0..p.particles.len()).map(|k| p.diameter(k, D)).fold(0.0, f64::max);
    let pairs = separated_pairs(&cells, largest_eps, p.tau, p.probe_pairs, &weights);
    if pairs.is_empty() {
        return Err(ExperimentError::Config("no cell pairs are separated at this resolution".into()));
    }
    ctx.report.metric("probe_pairs", pairs.len());

    let mut rows = Vec::new();
    let mut at_start = Vec::new();
    let mut at_tau = Vec::new();
    for (k, &n) in p.particles.iter().enumerate() {
        let eps = p.diameter(k, D);
        let ensemble = factorized_ensemble::<D>(&spec, n, eps, p.replicas, ctx.seed, &format!("chaos-N{n}"))?;
        let evolved: Vec<_> = simulate_ensemble(&ensemble, p.tau)?.into_iter().map(|(c, _)| c).collect();
        for (label, data, store) in [("0", &ensemble, &mut at_start), ("tau", &evolved, &mut at_tau)] {
            let defect = chaos_defect(data, &cells, &pairs, MarginalOptions::default())?;
            let t = if label == "0" { 0.0 } else { p.tau };
            rows.push(format!(
                "{n},{eps:e},{t:e},{:e},{:e},{:e}",
                defect.max_abs.value,
                defect.max_abs.stderr,
                defect.fraction_consistent_with_zero(3.0)
            ));
            ctx.out.table(&format!("chaos_pairs_N{n}_t{label}.csv"), |buf| defect.write_csv(buf))?;
            store.push(defect);
        }
        ctx.stage(&format!("N = {n}"));
    }
    ctx.out.rows("chaos_defect.csv", "N,eps,t,max_defect,max_defect_stderr,fraction_within_3se", &rows)?;

    for (label, defects) in [("t0", &at_start), ("tau", &at_tau)] {
        let refs: Vec<&ChaosDefect> = defects.iter().collect();
        let (ok, worst) = nonincreasing(&refs);
        ctx.report.metric(&format!("max_defect_{label}"), defects.iter().map(|d| d.max_abs.value).collect::<Vec<_>>());
        ctx.report.check(
            &format!("max_defect_nonincreasing_{label}"),
            ok,
            worst,
            3.0,
            "largest increase between consecutive N, in combined standard errors",
        );
    }
    Ok(())
}
