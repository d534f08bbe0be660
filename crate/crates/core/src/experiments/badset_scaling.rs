use serde::{Deserialize, Serialize};

use super::common::require;
use super::{Context, ExperimentError};
use crate::badsets::{estimate_sweep, in_bad_set, uniform_state, BadSetSpec, Side};
use crate::seeding;
use crate::stats::log_log_slope;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BadsetScalingParams {
    pub eps0: Vec<f64>,
    pub particles: usize,
    pub velocity_cutoff: f64,
    pub horizon: f64,
    pub samples: usize,
    /// Samples for the pointwise nesting and reversal checks.
    pub pointwise_samples: usize,
    /// Radius at which the intersection is compared with the one-sided set.
    pub intersection_eps0: f64,
    pub slope_tolerance: f64,
}

impl Default for BadsetScalingParams {
    fn default() -> Self {
        Self {
            eps0: vec![0.04, 0.02, 0.01, 0.005],
            particles: 2,
            velocity_cutoff: 2.0,
            horizon: 0.5,
            samples: 100_000,
            pointwise_samples: 10_000,
            intersection_eps0: 0.01,
            slope_tolerance: 0.15,
        }
    }
}

impl BadsetScalingParams {
    pub(super) fn checked(mut self, _dim: usize, _warnings: &mut Vec<String>) -> Result<Self, ExperimentError> {
        require(self.eps0.len() >= 2 && self.eps0.iter().all(|&e| e > 0.0 && e < 0.5), || {
            "eps0 needs at least two radii in (0, 0.5)".into()
        })?;
        require(self.particles >= 2, || "particles must be at least 2".into())?;
        require(self.velocity_cutoff > 0.0 && self.horizon > 0.0, || "velocity_cutoff and horizon must be positive".into())?;
        require(self.samples > 0 && self.pointwise_samples > 0, || "sample counts must be positive".into())?;
        require(self.eps0.contains(&self.intersection_eps0), || "intersection_eps0 must be one of eps0".into())?;
        self.eps0.sort_by(f64::total_cmp);
        Ok(self)
    }
}

pub(super) fn run<const D: usize>(p: &BadsetScalingParams, ctx: &mut Context) -> Result<(), ExperimentError> {
    let template = BadSetSpec {
        n: p.particles,
        eps0: p.eps0[0],
        velocity_cutoff: p.velocity_cutoff,
        horizon: p.horizon,
        side: Side::Minus,
    };
    let mut rng = seeding::stream(ctx.seed, "badset-sweep", 0);
    let sweep = estimate_sweep::<D>(&p.eps0, &template, p.samples, &mut rng)?;
    let mut rows = Vec::new();
    for (k, e) in p.eps0.iter().enumerate() {
        rows.push(sweep.plus[k].csv_row());
        rows.push(sweep.minus[k].csv_row());
        let both = sweep.both[k];
        rows.push(format!(
            "{},both,{},{},{},{:e},{:e},{}",
            e, p.particles, p.velocity_cutoff, p.horizon, both.value, both.stderr, both.samples
        ));
    }
    ctx.out.rows("badset_measure.csv", crate::badsets::MeasureEstimate::csv_header(), &rows)?;
    ctx.stage("sweep");

    let fractions: Vec<f64> = sweep.minus.iter().map(|m| m.fraction).collect();
    let target = (D - 1) as f64;
    if fractions.iter().all(|&f| f > 0.0) {
        let (slope, slope_err) = log_log_slope(&p.eps0, &fractions);
        let plus: Vec<f64> = sweep.plus.iter().map(|m| m.fraction).collect();
        let (plus_slope, _) = log_log_slope(&p.eps0, &plus);
        ctx.report.metric("slope_minus", slope);
        ctx.report.metric("slope_minus_stderr", slope_err);
        ctx.report.metric("slope_plus", plus_slope);
        ctx.report.check(
            "slope_equals_d_minus_1",
            (slope - target).abs() <= p.slope_tolerance,
            slope,
            target,
            format!("|slope - {target}| <= {}", p.slope_tolerance),
        );
    } else {
        ctx.report.check("slope_equals_d_minus_1", false, f64::NAN, target, "some radius had no hits");
    }

    let k = p.eps0.iter().position(|&e| e == p.intersection_eps0).expect("checked");
    let one_sided = sweep.minus[k].fraction.min(sweep.plus[k].fraction);
    let both = sweep.both[k].value;
    ctx.report.metric("intersection_fraction", both);
    ctx.report.metric("one_sided_fraction", one_sided);
    ctx.report.check(
        "intersection_small",
        one_sided > 0.0 && both * 10.0 <= one_sided,
        if one_sided > 0.0 { both / one_sided } else { f64::NAN },
        0.1,
        format!("intersection / one-sided fraction at eps0 = {}", p.intersection_eps0),
    );

    // pointwise checks on fresh samples
    let mut rng = seeding::stream(ctx.seed, "badset-pointwise", 0);
    let mut nesting_violations = 0usize;
    let mut duality_violations = 0usize;
    for _ in 0..p.pointwise_samples {
        let z = uniform_state::<D, _>(p.particles, p.velocity_cutoff, &mut rng);
        let flipped: Vec<_> = z.iter().map(|s| crate::ParticleState { x: s.x, v: -s.v }).collect();
        for side in [Side::Plus, Side::Minus] {
            let mut previous = false;
            for &e in &p.eps0 {
                let inside = in_bad_set(&z, &BadSetSpec { eps0: e, side, ..template })?;
                if previous && !inside {
                    nesting_violations += 1;
                }
                previous = inside;
            }
        }
        for &e in &p.eps0 {
            let minus = in_bad_set(&z, &BadSetSpec { eps0: e, side: Side::Minus, ..template })?;
            let plus_flipped = in_bad_set(&flipped, &BadSetSpec { eps0: e, side: Side::Plus, ..template })?;
            if minus != plus_flipped {
                duality_violations += 1;
            }
        }
    }
    ctx.report.check("nesting_pointwise", nesting_violations == 0, nesting_violations as f64, 0.0, "violations");
    ctx.report.check("reversal_duality", duality_violations == 0, duality_violations as f64, 0.0, "mismatches");
    ctx.stage("pointwise");
    Ok(())
}
