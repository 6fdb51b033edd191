//! Two-body low-thrust dynamics with an explicit mass state.
//!
//! The state is x = [r; v; m] with a 2- or 3-dimensional position/velocity
//! block and a scalar mass, the control u is the thrust vector, and the model
//! is the stochastic system
//!
//!   dx = f(x, u) dt + g(x) dw,
//!   f = [v; −μ r/‖r‖³ + u/m; −‖u‖/(I_sp g₀)],
//!   g = [0; (γ/m)·I; 0],
//!
//! so the disturbance is a force-level white noise whose acceleration effect
//! grows as propellant burns off. A reduced variant treats the mass as a
//! known function of time (see [`FrozenMassModel`]), which is used to measure
//! how much of the dispersion is attributable to modeling mass as a state.

use crate::error::{Error, Result};
use crate::scale::ScaleSet;
use nalgebra::{DMatrix, DVector};

/// Reject states whose radius falls below this floor (scaled length units);
/// heliocentric trajectories never approach the origin, so hitting the floor
/// indicates a corrupted state rather than physics.
pub const RADIUS_FLOOR: f64 = 1e-3;

/// Smoothing constant ε for ∂‖u‖/∂u near u = 0 (scaled force units). Applied
/// inside [`jacobians`] only; drift evaluation stays exact so coast arcs have
/// a mass rate of exactly zero.
pub const THRUST_NORM_SMOOTHING: f64 = 1e-8;

/// Physical constants of the spacecraft/environment pair.
///
/// All values use the km–kg–s system: `mu` in km³/s², `g0` in km/s², `u_max`
/// and the force scale of `gamma` in kg·km/s² (1 N = 1e-3 kg·km/s²), `gamma`
/// itself in kg·km/s^{3/2}. Scenario files may still use N or m/s²; the
/// parser converts at ingest.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalParams {
    /// Gravitational parameter (km³/s², or scaled).
    pub mu: f64,
    /// Specific impulse (s, or scaled time).
    pub isp: f64,
    /// Standard gravity (km/s², or scaled acceleration).
    pub g0: f64,
    /// Maximum thrust magnitude (kg·km/s², or scaled force).
    pub u_max: f64,
    /// Disturbance force intensity (kg·km/s^{3/2}, or scaled force·√time).
    pub gamma: f64,
    /// Disturbance dimension; equals the control dimension here.
    pub n_w: usize,
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mu", self.mu),
            ("isp", self.isp),
            ("g0", self.g0),
            ("u_max", self.u_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        if self.n_w == 0 {
            return Err(Error::InvalidParameter("n_w must be at least 1".into()));
        }
        Ok(())
    }

    /// Effective exhaust velocity I_sp·g₀ (km/s or scaled speed).
    pub fn exhaust_velocity(&self) -> f64 {
        self.isp * self.g0
    }

    /// Express the parameters in the nondimensional system of `scales`.
    pub fn nondimensionalize(&self, scales: &ScaleSet) -> PhysicalParams {
        PhysicalParams {
            mu: self.mu / scales.mu_unit(),
            isp: self.isp / scales.time_unit,
            g0: self.g0 / scales.accel_unit(),
            u_max: self.u_max / scales.force_unit(),
            gamma: self.gamma / scales.gamma_unit(),
            n_w: self.n_w,
        }
    }

    /// Inverse of [`PhysicalParams::nondimensionalize`].
    pub fn dimensionalize(&self, scales: &ScaleSet) -> PhysicalParams {
        PhysicalParams {
            mu: self.mu * scales.mu_unit(),
            isp: self.isp * scales.time_unit,
            g0: self.g0 * scales.accel_unit(),
            u_max: self.u_max * scales.force_unit(),
            gamma: self.gamma * scales.gamma_unit(),
            n_w: self.n_w,
        }
    }
}

/// Typed state: position and velocity blocks of equal dimension plus mass.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub position: DVector<f64>,
    pub velocity: DVector<f64>,
    pub mass: f64,
}

impl StateVector {
    pub fn new(position: DVector<f64>, velocity: DVector<f64>, mass: f64) -> Result<Self> {
        let s = StateVector {
            position,
            velocity,
            mass,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.position.len() != self.velocity.len() {
            return Err(Error::DimensionMismatch(format!(
                "position dim {} != velocity dim {}",
                self.position.len(),
                self.velocity.len()
            )));
        }
        if !(self.position.len() == 2 || self.position.len() == 3) {
            return Err(Error::DimensionMismatch(format!(
                "position dimension must be 2 or 3, got {}",
                self.position.len()
            )));
        }
        if !(self.mass > 0.0) {
            return Err(Error::NonpositiveMass(self.mass));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    pub fn n_x(&self) -> usize {
        2 * self.dim() + 1
    }

    /// Flatten to [r; v; m].
    pub fn to_flat(&self) -> DVector<f64> {
        let d = self.dim();
        let mut x = DVector::zeros(2 * d + 1);
        x.rows_mut(0, d).copy_from(&self.position);
        x.rows_mut(d, d).copy_from(&self.velocity);
        x[2 * d] = self.mass;
        x
    }

    /// Build from a flat [r; v; m] vector (length 5 or 7).
    pub fn from_flat(x: &DVector<f64>) -> Result<Self> {
        let d = match x.len() {
            5 => 2,
            7 => 3,
            n => {
                return Err(Error::DimensionMismatch(format!(
                    "flat state length must be 5 or 7, got {n}"
                )))
            }
        };
        StateVector::new(
            x.rows(0, d).into_owned(),
            x.rows(d, d).into_owned(),
            x[2 * d],
        )
    }
}

/// Typed control: the thrust vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVector {
    pub thrust: DVector<f64>,
}

impl ControlVector {
    pub fn new(thrust: DVector<f64>) -> Result<Self> {
        if !thrust.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(
                "control entries must be finite".into(),
            ));
        }
        Ok(ControlVector { thrust })
    }
}

fn check_point(dim: usize, x: &DVector<f64>, has_mass: bool) -> Result<(f64, f64)> {
    let r = x.rows(0, dim).norm();
    if r < RADIUS_FLOOR {
        return Err(Error::SingularRadius {
            radius: r,
            floor: RADIUS_FLOOR,
        });
    }
    let m = if has_mass { x[2 * dim] } else { f64::NAN };
    if has_mass && !(m > 0.0) {
        return Err(Error::NonpositiveMass(m));
    }
    Ok((r, m))
}

/// Time derivative of the flat state [r; v; m]:
/// [v; −μ r/‖r‖³ + u/m; −‖u‖/(I_sp g₀)]. Exact everywhere (no smoothing).
pub fn drift(x: &DVector<f64>, u: &DVector<f64>, params: &PhysicalParams) -> Result<DVector<f64>> {
    let dim = flat_dim(x.len())?;
    expect_control_dim(u.len(), dim)?;
    let (r_norm, m) = check_point(dim, x, true)?;
    let r = x.rows(0, dim);
    let v = x.rows(dim, dim);
    let mut dx = DVector::zeros(2 * dim + 1);
    dx.rows_mut(0, dim).copy_from(&v);
    let grav = -params.mu / r_norm.powi(3);
    for i in 0..dim {
        dx[dim + i] = grav * r[i] + u[i] / m;
    }
    dx[2 * dim] = -u.norm() / params.exhaust_velocity();
    Ok(dx)
}

/// Diffusion matrix g(x): zero position and mass rows, (γ/m)·I velocity block.
/// Shape n_x × n_w with n_w equal to the control dimension.
pub fn diffusion(x: &DVector<f64>, params: &PhysicalParams) -> Result<DMatrix<f64>> {
    let dim = flat_dim(x.len())?;
    let (_, m) = check_point(dim, x, true)?;
    let mut g = DMatrix::zeros(2 * dim + 1, params.n_w);
    let coeff = params.gamma / m;
    for i in 0..dim.min(params.n_w) {
        g[(dim + i, i)] = coeff;
    }
    Ok(g)
}

/// First-order expansion of [`drift`] about (x̂, û):
/// f(x, u) ≈ A (x − x̂) + B (u − û) + f(x̂, û), returned as (A, B, c) with
/// c = f(x̂, û) − A x̂ − B û so that f(x̂, û) = A x̂ + B û + c exactly.
///
/// The mass-rate row involves ∂‖u‖/∂u = uᵀ/‖u‖, undefined at u = 0; a
/// smoothed norm √(‖u‖² + ε²) is used for that row only so references with
/// coast arcs stay differentiable.
pub fn jacobians(
    x: &DVector<f64>,
    u: &DVector<f64>,
    params: &PhysicalParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let dim = flat_dim(x.len())?;
    expect_control_dim(u.len(), dim)?;
    let (r_norm, m) = check_point(dim, x, true)?;
    let n_x = 2 * dim + 1;
    let r = x.rows(0, dim).into_owned();
    let ve = params.exhaust_velocity();

    let mut a = DMatrix::zeros(n_x, n_x);
    // ∂ṙ/∂v = I
    for i in 0..dim {
        a[(i, dim + i)] = 1.0;
    }
    // Gravity gradient ∂(−μ r/‖r‖³)/∂r = μ(3 r rᵀ/‖r‖⁵ − I/‖r‖³)
    let r3 = r_norm.powi(3);
    let r5 = r_norm.powi(5);
    for i in 0..dim {
        for j in 0..dim {
            let mut v = 3.0 * params.mu * r[i] * r[j] / r5;
            if i == j {
                v -= params.mu / r3;
            }
            a[(dim + i, j)] = v;
        }
    }
    // ∂(u/m)/∂m = −u/m²
    for i in 0..dim {
        a[(dim + i, 2 * dim)] = -u[i] / (m * m);
    }

    let mut b = DMatrix::zeros(n_x, dim);
    for i in 0..dim {
        b[(dim + i, i)] = 1.0 / m;
    }
    // Mass-rate row with the smoothed norm.
    let u_norm_smooth = (u.norm_squared() + THRUST_NORM_SMOOTHING.powi(2)).sqrt();
    for j in 0..dim {
        b[(2 * dim, j)] = -u[j] / (u_norm_smooth * ve);
    }

    let f0 = drift(x, u, params)?;
    let c = f0 - &a * x - &b * u;
    Ok((a, b, c))
}

fn flat_dim(n_x: usize) -> Result<usize> {
    match n_x {
        5 => Ok(2),
        7 => Ok(3),
        n => Err(Error::DimensionMismatch(format!(
            "flat state length must be 5 or 7, got {n}"
        ))),
    }
}

fn expect_control_dim(n_u: usize, dim: usize) -> Result<()> {
    if n_u != dim {
        return Err(Error::DimensionMismatch(format!(
            "control dim {n_u} does not match position dim {dim}"
        )));
    }
    Ok(())
}

/// Piecewise-linear mass history m(t), used when the mass is excluded from
/// the optimizer state. Built from a feedforward schedule: under a zero-order
/// hold the mass rate −‖F_k‖/(I_sp g₀) is constant on each segment, so the
/// exact profile is linear between nodes.
#[derive(Clone, Debug)]
pub struct MassProfile {
    times: Vec<f64>,
    masses: Vec<f64>,
}

impl MassProfile {
    /// Exact mass bookkeeping for ZOH feedforwards: node k+1 mass is
    /// m_k − ‖F_k‖·Δt_k/(I_sp g₀).
    pub fn from_feedforward(
        times: &[f64],
        m0: f64,
        feedforwards: &[DVector<f64>],
        params: &PhysicalParams,
    ) -> Result<Self> {
        if times.len() != feedforwards.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "need {} node times for {} segments, got {}",
                feedforwards.len() + 1,
                feedforwards.len(),
                times.len()
            )));
        }
        let ve = params.exhaust_velocity();
        let mut masses = Vec::with_capacity(times.len());
        let mut m = m0;
        masses.push(m);
        for (k, f) in feedforwards.iter().enumerate() {
            m -= f.norm() * (times[k + 1] - times[k]) / ve;
            if !(m > 0.0) {
                return Err(Error::NonpositiveMass(m));
            }
            masses.push(m);
        }
        Ok(MassProfile {
            times: times.to_vec(),
            masses,
        })
    }

    /// Linear interpolation, clamped to the profile's time span.
    pub fn mass_at(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.masses[0];
        }
        if t >= self.times[n - 1] {
            return self.masses[n - 1];
        }
        // partition_point: first index with times[i] > t, so seg = that - 1.
        let hi = self.times.partition_point(|&tt| tt <= t);
        let k = hi - 1;
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        self.masses[k] * (1.0 - w) + self.masses[k + 1] * w
    }

    pub fn node_masses(&self) -> &[f64] {
        &self.masses
    }
}

/// A continuous-time controlled diffusion model the discretizer and the
/// Monte Carlo engine can evaluate: drift f(t, x, u), its Jacobians, and the
/// diffusion matrix g(t, x). Implementations must be pure so segments can be
/// processed in parallel.
pub trait Model: Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_w(&self) -> usize;
    /// Position/velocity block dimension (2 or 3).
    fn dim(&self) -> usize;
    /// Whether the mass is part of the state vector.
    fn has_mass_state(&self) -> bool {
        self.n_x() == 2 * self.dim() + 1
    }
    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobians(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)>;
    fn diffusion(&self, t: f64, x: &DVector<f64>) -> Result<DMatrix<f64>>;
    /// Instantaneous mass for a given (t, x); models without a mass state
    /// consult their stored profile.
    fn mass_of(&self, t: f64, x: &DVector<f64>) -> f64;
}

/// The full model: mass is the last state component and every coupling
/// (u/m thrust acceleration, −u/m² mass sensitivity, γ/m diffusion) follows
/// from it. Time-invariant.
#[derive(Clone, Debug)]
pub struct FullModel {
    pub params: PhysicalParams,
    pub dim: usize,
}

impl FullModel {
    pub fn new(params: PhysicalParams, dim: usize) -> Result<Self> {
        params.validate()?;
        if dim != 2 && dim != 3 {
            return Err(Error::DimensionMismatch(format!(
                "dimension must be 2 or 3, got {dim}"
            )));
        }
        Ok(FullModel { params, dim })
    }
}

impl Model for FullModel {
    fn n_x(&self) -> usize {
        2 * self.dim + 1
    }
    fn n_u(&self) -> usize {
        self.dim
    }
    fn n_w(&self) -> usize {
        self.params.n_w
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        drift(x, u, &self.params)
    }
    fn jacobians(
        &self,
        _t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        jacobians(x, u, &self.params)
    }
    fn diffusion(&self, _t: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        diffusion(x, &self.params)
    }
    fn mass_of(&self, _t: f64, x: &DVector<f64>) -> f64 {
        x[2 * self.dim]
    }
}

/// Reduced model for the "deterministic mass" comparison: the state is
/// [r; v] only and the mass enters as the known time profile m(t), so the
/// thrust acceleration is u/m(t) and the diffusion is γ/m(t). The profile is
/// rebuilt from the current feedforward each SCP pass.
#[derive(Clone, Debug)]
pub struct FrozenMassModel {
    pub params: PhysicalParams,
    pub dim: usize,
    pub mass_profile: MassProfile,
}

impl FrozenMassModel {
    pub fn new(params: PhysicalParams, dim: usize, mass_profile: MassProfile) -> Result<Self> {
        params.validate()?;
        if dim != 2 && dim != 3 {
            return Err(Error::DimensionMismatch(format!(
                "dimension must be 2 or 3, got {dim}"
            )));
        }
        Ok(FrozenMassModel {
            params,
            dim,
            mass_profile,
        })
    }
}

impl Model for FrozenMassModel {
    fn n_x(&self) -> usize {
        2 * self.dim
    }
    fn n_u(&self) -> usize {
        self.dim
    }
    fn n_w(&self) -> usize {
        self.params.n_w
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let dim = self.dim;
        expect_control_dim(u.len(), dim)?;
        let (r_norm, _) = check_point(dim, x, false)?;
        let m = self.mass_profile.mass_at(t);
        if !(m > 0.0) {
            return Err(Error::NonpositiveMass(m));
        }
        let mut dx = DVector::zeros(2 * dim);
        let grav = -self.params.mu / r_norm.powi(3);
        for i in 0..dim {
            dx[i] = x[dim + i];
            dx[dim + i] = grav * x[i] + u[i] / m;
        }
        Ok(dx)
    }
    fn jacobians(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        let dim = self.dim;
        expect_control_dim(u.len(), dim)?;
        let (r_norm, _) = check_point(dim, x, false)?;
        let m = self.mass_profile.mass_at(t);
        let n_x = 2 * dim;
        let mut a = DMatrix::zeros(n_x, n_x);
        for i in 0..dim {
            a[(i, dim + i)] = 1.0;
        }
        let r3 = r_norm.powi(3);
        let r5 = r_norm.powi(5);
        for i in 0..dim {
            for j in 0..dim {
                let mut v = 3.0 * self.params.mu * x[i] * x[j] / r5;
                if i == j {
                    v -= self.params.mu / r3;
                }
                a[(dim + i, j)] = v;
            }
        }
        let mut b = DMatrix::zeros(n_x, dim);
        for i in 0..dim {
            b[(dim + i, i)] = 1.0 / m;
        }
        let f0 = self.drift(t, x, u)?;
        let c = f0 - &a * x - &b * u;
        Ok((a, b, c))
    }
    fn diffusion(&self, t: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let dim = self.dim;
        check_point(dim, x, false)?;
        let m = self.mass_profile.mass_at(t);
        let mut g = DMatrix::zeros(2 * dim, self.params.n_w);
        for i in 0..dim.min(self.params.n_w) {
            g[(dim + i, i)] = self.params.gamma / m;
        }
        Ok(g)
    }
    fn mass_of(&self, t: f64, _x: &DVector<f64>) -> f64 {
        self.mass_profile.mass_at(t)
    }
}

/// Classical fixed-step RK4 propagation of the drift under a zero-order-hold
/// control from `t0` to `t1`. Deterministic and reproducible; also used by
/// the discretizer to carry the reference inside a segment.
pub fn propagate_zoh(
    model: &dyn Model,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    t0: f64,
    t1: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    let n = substeps.max(1);
    let h = (t1 - t0) / n as f64;
    let mut x = x0.clone();
    let mut t = t0;
    for _ in 0..n {
        let k1 = model.drift(t, &x, u)?;
        let k2 = model.drift(t + 0.5 * h, &(&x + &k1 * (0.5 * h)), u)?;
        let k3 = model.drift(t + 0.5 * h, &(&x + &k2 * (0.5 * h)), u)?;
        let k4 = model.drift(t + h, &(&x + &k3 * h), u)?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        t += h;
    }
    Ok(x)
}
