//! Nondimensional unit systems.
//!
//! All internal dimensional bookkeeping uses the km–kg–s system, so forces are
//! carried in kg·km/s² (1 N = 1e-3 kg·km/s²) and the disturbance intensity in
//! kg·km/s^{3/2}. A [`ScaleSet`] maps those quantities onto a nondimensional
//! system in which the optimizer operates; the canonical choice puts the
//! gravitational parameter at exactly 1 so Kepler terms stay O(1).

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// One astronomical unit in kilometres.
pub const AU_KM: f64 = 1.495978707e8;

/// Conversion from newtons to the internal force unit kg·km/s².
pub const NEWTON_TO_KG_KM_S2: f64 = 1e-3;

/// A consistent set of base units (length, time, mass) with derived units for
/// speed, acceleration, force, gravitational parameter and diffusion
/// intensity. Dividing a dimensional quantity by its unit nondimensionalizes
/// it; multiplying restores the original.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet {
    /// Length unit in km.
    pub length_unit: f64,
    /// Time unit in s.
    pub time_unit: f64,
    /// Mass unit in kg.
    pub mass_unit: f64,
}

impl ScaleSet {
    pub fn new(length_unit: f64, time_unit: f64, mass_unit: f64) -> Result<Self> {
        for &u in &[length_unit, time_unit, mass_unit] {
            if !(u > 0.0) || !u.is_finite() {
                return Err(Error::InvalidScale(u));
            }
        }
        Ok(ScaleSet {
            length_unit,
            time_unit,
            mass_unit,
        })
    }

    /// The identity scaling (all base units 1): scaled values equal raw values.
    pub fn identity() -> Self {
        ScaleSet {
            length_unit: 1.0,
            time_unit: 1.0,
            mass_unit: 1.0,
        }
    }

    /// Canonical heliocentric scaling: length = 1 AU, time chosen so the
    /// scaled gravitational parameter is exactly 1, mass = the given
    /// reference mass (typically the initial spacecraft mass).
    pub fn canonical(mu_km3_s2: f64, reference_mass_kg: f64) -> Result<Self> {
        if !(mu_km3_s2 > 0.0) {
            return Err(Error::InvalidScale(mu_km3_s2));
        }
        let time_unit = (AU_KM.powi(3) / mu_km3_s2).sqrt();
        ScaleSet::new(AU_KM, time_unit, reference_mass_kg)
    }

    // Derived units.
    pub fn speed_unit(&self) -> f64 {
        self.length_unit / self.time_unit
    }
    pub fn accel_unit(&self) -> f64 {
        self.length_unit / self.time_unit.powi(2)
    }
    /// Force unit in kg·km/s².
    pub fn force_unit(&self) -> f64 {
        self.mass_unit * self.accel_unit()
    }
    /// Gravitational-parameter unit in km³/s².
    pub fn mu_unit(&self) -> f64 {
        self.length_unit.powi(3) / self.time_unit.powi(2)
    }
    /// Disturbance-intensity unit in kg·km/s^{3/2} (force × √time).
    pub fn gamma_unit(&self) -> f64 {
        self.force_unit() * self.time_unit.sqrt()
    }
    /// Mass-rate unit in kg/s.
    pub fn mass_rate_unit(&self) -> f64 {
        self.mass_unit / self.time_unit
    }

    // Scalar helpers: `scale_*` divides by the unit, `unscale_*` multiplies.
    pub fn scale_length(&self, v: f64) -> f64 {
        v / self.length_unit
    }
    pub fn unscale_length(&self, v: f64) -> f64 {
        v * self.length_unit
    }
    pub fn scale_time(&self, v: f64) -> f64 {
        v / self.time_unit
    }
    pub fn unscale_time(&self, v: f64) -> f64 {
        v * self.time_unit
    }
    pub fn scale_mass(&self, v: f64) -> f64 {
        v / self.mass_unit
    }
    pub fn unscale_mass(&self, v: f64) -> f64 {
        v * self.mass_unit
    }
    pub fn scale_speed(&self, v: f64) -> f64 {
        v / self.speed_unit()
    }
    pub fn unscale_speed(&self, v: f64) -> f64 {
        v * self.speed_unit()
    }
    pub fn scale_force(&self, v: f64) -> f64 {
        v / self.force_unit()
    }
    pub fn unscale_force(&self, v: f64) -> f64 {
        v * self.force_unit()
    }

    /// Per-component units of a state vector [r; v; m] with `dim`-dimensional
    /// position/velocity blocks. When the vector has length 2·dim (no mass
    /// row, as in the frozen-mass comparison model) the mass entry is absent.
    pub fn state_units(&self, dim: usize, n_x: usize) -> DVector<f64> {
        let mut u = DVector::zeros(n_x);
        for i in 0..dim {
            u[i] = self.length_unit;
            u[dim + i] = self.speed_unit();
        }
        if n_x == 2 * dim + 1 {
            u[2 * dim] = self.mass_unit;
        }
        u
    }

    /// Nondimensionalize a state vector (componentwise divide by units).
    pub fn scale_state(&self, x: &DVector<f64>, dim: usize) -> DVector<f64> {
        let units = self.state_units(dim, x.len());
        x.component_div(&units)
    }

    /// Restore a dimensional state vector (componentwise multiply by units).
    pub fn unscale_state(&self, x: &DVector<f64>, dim: usize) -> DVector<f64> {
        let units = self.state_units(dim, x.len());
        x.component_mul(&units)
    }

    /// Nondimensionalize a state covariance: P_scaled[i][j] = P[i][j]/(u_i·u_j).
    pub fn scale_state_cov(&self, p: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
        let units = self.state_units(dim, p.nrows());
        let mut out = p.clone();
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                out[(i, j)] /= units[i] * units[j];
            }
        }
        out
    }

    /// Restore a dimensional state covariance.
    pub fn unscale_state_cov(&self, p: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
        let units = self.state_units(dim, p.nrows());
        let mut out = p.clone();
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                out[(i, j)] *= units[i] * units[j];
            }
        }
        out
    }

    /// Nondimensionalize a control (thrust) vector.
    pub fn scale_control(&self, u: &DVector<f64>) -> DVector<f64> {
        u / self.force_unit()
    }

    pub fn unscale_control(&self, u: &DVector<f64>) -> DVector<f64> {
        u * self.force_unit()
    }
}
