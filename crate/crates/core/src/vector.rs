//! Fixed-dimension real vectors used for positions, displacements and velocities.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A `D`-component real vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vector<const D: usize>(pub [f64; D]);

impl<const D: usize> Vector<D> {
    pub const fn zero() -> Self {
        Self([0.0; D])
    }

    pub fn from_slice(values: &[f64]) -> Option<Self> {
        let arr: [f64; D] = values.try_into().ok()?;
        Some(Self(arr))
    }

    /// Unit vector along `axis`.
    pub fn unit(axis: usize) -> Self {
        let mut v = Self::zero();
        v.0[axis] = 1.0;
        v
    }

    #[inline]
    pub fn dot(&self, other: &Self) -> f64 {
        let mut acc = 0.0;
        for k in 0..D {
            acc += self.0[k] * other.0[k];
        }
        acc
    }

    #[inline]
    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Returns `self / |self|`, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            None
        } else {
            Some(*self * (1.0 / n))
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.map(f))
    }
}

impl<const D: usize> Default for Vector<D> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<const D: usize> From<[f64; D]> for Vector<D> {
    fn from(value: [f64; D]) -> Self {
        Self(value)
    }
}

impl<const D: usize> Index<usize> for Vector<D> {
    type Output = f64;
    #[inline]
    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

impl<const D: usize> IndexMut<usize> for Vector<D> {
    #[inline]
    fn index_mut(&mut self, index: usize) -> &mut f64 {
        &mut self.0[index]
    }
}

impl<const D: usize> Add for Vector<D> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        for k in 0..D {
            self.0[k] += rhs.0[k];
        }
        self
    }
}

impl<const D: usize> AddAssign for Vector<D> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        for k in 0..D {
            self.0[k] += rhs.0[k];
        }
    }
}

impl<const D: usize> Sub for Vector<D> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        for k in 0..D {
            self.0[k] -= rhs.0[k];
        }
        self
    }
}

impl<const D: usize> SubAssign for Vector<D> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        for k in 0..D {
            self.0[k] -= rhs.0[k];
        }
    }
}

impl<const D: usize> Neg for Vector<D> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self(self.0.map(|c| -c))
    }
}

impl<const D: usize> Mul<f64> for Vector<D> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        Self(self.0.map(|c| c * rhs))
    }
}

impl<const D: usize> Mul<Vector<D>> for f64 {
    type Output = Vector<D>;
    #[inline]
    fn mul(self, rhs: Vector<D>) -> Vector<D> {
        rhs * self
    }
}

impl<const D: usize> Serialize for Vector<D> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.as_slice().serialize(serializer)
    }
}

impl<'de, const D: usize> Deserialize<'de> for Vector<D> {
    fn deserialize<De: Deserializer<'de>>(deserializer: De) -> Result<Self, De::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        Self::from_slice(&values).ok_or_else(|| {
            serde::de::Error::custom(format!("expected {D} components, got {}", values.len()))
        })
    }
}

/// Surface area of the unit sphere `S^{D-1}`.
pub fn sphere_area(dim: usize) -> f64 {
    use std::f64::consts::PI;
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        d => {
            // |S^{d-1}| = 2 pi^{d/2} / Gamma(d/2)
            let half = d as f64 / 2.0;
            2.0 * PI.powf(half) / statrs::function::gamma::gamma(half)
        }
    }
}

/// `∫_{S^{d-1}} (e·ν)₊ dν` for a unit vector `e`: the angular factor of the hard-sphere kernel.
pub fn positive_cosine_integral(dim: usize) -> f64 {
    // equals |S^{d-2}| / (d-1)
    match dim {
        2 => 2.0,
        3 => std::f64::consts::PI,
        d => sphere_area(d - 1) / (d as f64 - 1.0),
    }
}

/// Volume of the unit ball in `dim` dimensions.
pub fn ball_volume(dim: usize) -> f64 {
    sphere_area(dim) / dim as f64
}
