//! Uniform cell-centered velocity grids and densities sampled on them.

use serde::Serialize;

use crate::vector::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VelocityGrid<const D: usize> {
    pub per_axis: usize,
    pub v_cut: f64,
}

impl<const D: usize> VelocityGrid<D> {
    pub fn new(per_axis: usize, v_cut: f64) -> Self {
        assert!(per_axis >= 3, "need at least three nodes per axis");
        assert!(v_cut > 0.0);
        Self { per_axis, v_cut }
    }

    /// Cut at `5 / sqrt(beta)`; 32 nodes per axis in 2-D, 16 in 3-D.
    pub fn default_for(beta: f64) -> Self {
        let per_axis = if D <= 2 { 32 } else { 16 };
        Self::new(per_axis, 5.0 / beta.sqrt())
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        2.0 * self.v_cut / self.per_axis as f64
    }

    #[inline]
    pub fn weight(&self) -> f64 {
        self.spacing().powi(D as i32)
    }

    pub fn len(&self) -> usize {
        self.per_axis.pow(D as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn coordinate(&self, k: usize) -> f64 {
        -self.v_cut + (k as f64 + 0.5) * self.spacing()
    }

    pub fn multi_index(&self, mut idx: usize) -> [usize; D] {
        let mut m = [0usize; D];
        for a in (0..D).rev() {
            m[a] = idx % self.per_axis;
            idx /= self.per_axis;
        }
        m
    }

    #[inline]
    pub fn flat_index(&self, m: &[usize; D]) -> usize {
        m.iter().fold(0, |acc, &k| acc * self.per_axis + k)
    }

    pub fn node(&self, idx: usize) -> Vector<D> {
        let m = self.multi_index(idx);
        let mut v = Vector::zero();
        for a in 0..D {
            v[a] = self.coordinate(m[a]);
        }
        v
    }

    pub fn nodes(&self) -> Vec<Vector<D>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Node values of a function.
    pub fn project(&self, f: impl Fn(&Vector<D>) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(&self.node(i))).collect()
    }

    /// Grid cell containing `v`, or `None` outside the box.
    pub fn cell_of(&self, v: &Vector<D>) -> Option<usize> {
        let h = self.spacing();
        let mut m = [0usize; D];
        for a in 0..D {
            let s = (v[a] + self.v_cut) / h;
            if !(s >= 0.0 && s < self.per_axis as f64) {
                return None;
            }
            m[a] = s as usize;
        }
        Some(self.flat_index(&m))
    }

    #[inline]
    pub fn contains(&self, v: &Vector<D>) -> bool {
        v.as_slice().iter().all(|c| c.abs() < self.v_cut)
    }

    /// Mass, momentum and `∫|v|^2 f` of node values.
    pub fn moments(&self, f: &[f64]) -> Moments<D> {
        let w = self.weight();
        let mut m = Moments {
            mass: 0.0,
            momentum: Vector::zero(),
            energy: 0.0,
        };
        for (i, &fi) in f.iter().enumerate() {
            let v = self.node(i);
            m.mass += fi * w;
            m.momentum += v * (fi * w);
            m.energy += v.norm_sq() * fi * w;
        }
        m
    }

    /// Centered Maxwellian of unit mass at inverse temperature `beta`, projected on the nodes.
    pub fn maxwellian(&self, beta: f64) -> Vec<f64> {
        self.maxwellian_with(1.0, &Vector::zero(), beta)
    }

    pub fn maxwellian_with(&self, mass: f64, mean: &Vector<D>, beta: f64) -> Vec<f64> {
        let norm = mass * (beta / (2.0 * std::f64::consts::PI)).powf(D as f64 / 2.0);
        self.project(|v| norm * (-0.5 * beta * (*v - *mean).norm_sq()).exp())
    }

    /// Maxwellian with the same mass, momentum and energy as `f`.
    pub fn matched_maxwellian(&self, f: &[f64]) -> Vec<f64> {
        let m = self.moments(f);
        let mean = m.momentum * (1.0 / m.mass);
        let thermal = (m.energy / m.mass - mean.norm_sq()) / D as f64;
        self.maxwellian_with(m.mass, &mean, 1.0 / thermal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Moments<const D: usize> {
    pub mass: f64,
    pub momentum: Vector<D>,
    pub energy: f64,
}

/// Off-grid evaluation of a positive grid density by tensor quadratic interpolation of
/// `log f` on the nearest 3^D stencil, which reproduces Gaussians exactly. Stencils with a
/// non-positive value fall back to multilinear interpolation of `f`. Outside the box the
/// density is taken to be zero.
#[derive(Clone, Debug)]
pub struct Interpolant<'a, const D: usize> {
    grid: VelocityGrid<D>,
    values: &'a [f64],
    logs: Vec<f64>,
}

impl<'a, const D: usize> Interpolant<'a, D> {
    pub fn new(grid: VelocityGrid<D>, values: &'a [f64]) -> Self {
        let logs = values
            .iter()
            .map(|&f| if f > 0.0 { f.ln() } else { f64::NEG_INFINITY })
            .collect();
        Self { grid, values, logs }
    }

    pub fn grid(&self) -> &VelocityGrid<D> {
        &self.grid
    }

    /// Natural log of the interpolated density (`-inf` where it vanishes).
    #[inline]
    pub fn log_eval(&self, v: &Vector<D>) -> f64 {
        let n = self.grid.per_axis;
        let h = self.grid.spacing();
        let mut base = [0usize; D];
        let mut weights = [[0.0f64; 3]; D];
        for a in 0..D {
            let s = (v[a] + self.grid.v_cut) / h - 0.5;
            if !(s > -0.5 && s < n as f64 - 0.5) {
                return f64::NEG_INFINITY;
            }
            let j = (s.round() as usize).clamp(1, n - 2);
            let xi = s - j as f64;
            base[a] = j - 1;
            weights[a] = [0.5 * xi * (xi - 1.0), 1.0 - xi * xi, 0.5 * xi * (xi + 1.0)];
        }
        let mut acc = 0.0;
        let mut offs = [0usize; D];
        loop {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..D {
                w *= weights[a][offs[a]];
                idx = idx * n + base[a] + offs[a];
            }
            let l = self.logs[idx];
            if l == f64::NEG_INFINITY {
                return self.linear(v).max(0.0).ln();
            }
            acc += w * l;
            let mut a = 0;
            loop {
                if a == D {
                    return acc;
                }
                offs[a] += 1;
                if offs[a] < 3 {
                    break;
                }
                offs[a] = 0;
                a += 1;
            }
        }
    }

    #[inline]
    pub fn eval(&self, v: &Vector<D>) -> f64 {
        self.log_eval(v).exp()
    }

    /// Multilinear interpolation of the node values, clamped to the node hull.
    pub fn linear(&self, v: &Vector<D>) -> f64 {
        let n = self.grid.per_axis;
        let h = self.grid.spacing();
        let mut base = [0usize; D];
        let mut frac = [0.0f64; D];
        for a in 0..D {
            let s = ((v[a] + self.grid.v_cut) / h - 0.5).clamp(0.0, (n - 1) as f64);
            let j = (s.floor() as usize).min(n - 2);
            base[a] = j;
            frac[a] = s - j as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << D) {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..D {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx = idx * n + base[a] + bit;
            }
            acc += w * self.values[idx];
        }
        acc
    }
}
