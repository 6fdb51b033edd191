//! Discretization of the linearized stochastic dynamics.
//!
//! Over one segment [t_k, t_{k+1}] with a zero-order-hold control, the
//! linearized SDE
//!
//!   dx = (A(t) x + B(t) u + c(t)) dt + G(t) dw
//!
//! has the exact discrete form
//!
//!   x_{k+1} = A_k x_k + B_k u_k + c_k + w_k,   w_k ~ N(0, Q_k),
//!
//! where A_k is the state transition matrix over the segment and B_k, c_k,
//! Q_k are convolution integrals of the transition matrix against B(t), c(t)
//! and G(t)G(t)ᵀ. Rather than tabulating the transition matrix on a dense
//! grid, all four quantities are integrated in one pass as the augmented
//! matrix ODE system
//!
//!   Φ' = A(t)Φ,   B̃' = A(t)B̃ + B(t),   c̃' = A(t)c̃ + c(t),
//!   Q̃' = A(t)Q̃ + Q̃A(t)ᵀ + G(t)G(t)ᵀ,
//!
//! with the reference state re-propagated through the nonlinear drift inside
//! the segment so the Jacobians are evaluated on a continuously varying
//! reference rather than frozen at the node.

use crate::dynamics::{propagate_zoh, Model};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Default number of RK4 substeps per segment for the augmented integration.
pub const DEFAULT_SUBSTEPS: usize = 32;

/// A reference trajectory: node states, node times and per-segment ZOH
/// controls. Node count is always one more than segment count.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl ReferenceTrajectory {
    pub fn new(
        times: Vec<f64>,
        states: Vec<DVector<f64>>,
        controls: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let traj = ReferenceTrajectory {
            times,
            states,
            controls,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn n_segments(&self) -> usize {
        self.controls.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.times.len() {
            return Err(Error::InvalidReference(format!(
                "{} states vs {} times",
                self.states.len(),
                self.times.len()
            )));
        }
        if self.states.len() != self.controls.len() + 1 {
            return Err(Error::InvalidReference(format!(
                "{} nodes require {} controls, got {}",
                self.states.len(),
                self.states.len().saturating_sub(1),
                self.controls.len()
            )));
        }
        if self.states.len() < 2 {
            return Err(Error::InvalidReference("need at least 2 nodes".into()));
        }
        for k in 1..self.times.len() {
            if !(self.times[k] > self.times[k - 1]) {
                return Err(Error::InvalidReference(format!(
                    "times must be strictly increasing; row {k} has t = {} after {}",
                    self.times[k],
                    self.times[k - 1]
                )));
            }
        }
        let n_x = self.states[0].len();
        if self.states.iter().any(|s| s.len() != n_x) {
            return Err(Error::InvalidReference("inconsistent state dims".into()));
        }
        // States with an odd length carry a mass as the last entry; it must
        // stay positive and must not increase while thrust is applied.
        if n_x % 2 == 1 {
            let m_idx = n_x - 1;
            for (k, s) in self.states.iter().enumerate() {
                if !(s[m_idx] > 0.0) {
                    return Err(Error::InvalidReference(format!(
                        "node {k} has nonpositive mass {}",
                        s[m_idx]
                    )));
                }
            }
            for k in 0..self.controls.len() {
                if self.controls[k].norm() > 0.0
                    && self.states[k + 1][m_idx] > self.states[k][m_idx] + 1e-12
                {
                    return Err(Error::InvalidReference(format!(
                        "mass increases across thrusting segment {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Drop the mass row of every node state (for the frozen-mass model).
    pub fn without_mass_row(&self) -> ReferenceTrajectory {
        let n_x = self.states[0].len();
        if n_x % 2 == 0 {
            return self.clone();
        }
        ReferenceTrajectory {
            times: self.times.clone(),
            states: self
                .states
                .iter()
                .map(|s| s.rows(0, n_x - 1).into_owned())
                .collect(),
            controls: self.controls.clone(),
        }
    }
}

/// The exact discrete-time form of the linearized SDE over one segment.
#[derive(Clone, Debug)]
pub struct DiscreteSegment {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Process-noise covariance; symmetric PSD.
    pub q: DMatrix<f64>,
    /// A factor with G Gᵀ = Q.
    pub g: DMatrix<f64>,
    pub t0: f64,
    pub t1: f64,
}

/// Integrate the augmented matrix ODE system over segment `k` of the
/// reference with fixed-step RK4. The in-segment reference state is carried
/// as part of the augmented state, so A(t), B(t), c(t), G(t) follow the
/// nonlinear flow from the node.
pub fn discretize_segment(
    model: &dyn Model,
    reference: &ReferenceTrajectory,
    k: usize,
    substeps: usize,
) -> Result<DiscreteSegment> {
    if k >= reference.n_segments() {
        return Err(Error::DimensionMismatch(format!(
            "segment index {k} out of range (N = {})",
            reference.n_segments()
        )));
    }
    let n_x = model.n_x();
    let n_u = model.n_u();
    if reference.states[k].len() != n_x || reference.controls[k].len() != n_u {
        return Err(Error::DimensionMismatch(format!(
            "reference dims ({}, {}) do not match model ({n_x}, {n_u})",
            reference.states[k].len(),
            reference.controls[k].len()
        )));
    }
    let t0 = reference.times[k];
    let t1 = reference.times[k + 1];
    let u = &reference.controls[k];
    let n = substeps.max(1);
    let h = (t1 - t0) / n as f64;

    // Augmented state: reference x(t), Φ, B̃, c̃, Q̃.
    let mut x = reference.states[k].clone();
    let mut phi = DMatrix::<f64>::identity(n_x, n_x);
    let mut btil = DMatrix::<f64>::zeros(n_x, n_u);
    let mut ctil = DVector::<f64>::zeros(n_x);
    let mut qtil = DMatrix::<f64>::zeros(n_x, n_x);

    // One evaluation of all right-hand sides at (t, x, Φ, B̃, c̃, Q̃).
    struct Derivs {
        dx: DVector<f64>,
        dphi: DMatrix<f64>,
        dbtil: DMatrix<f64>,
        dctil: DVector<f64>,
        dqtil: DMatrix<f64>,
    }
    let eval = |t: f64,
                x: &DVector<f64>,
                phi: &DMatrix<f64>,
                btil: &DMatrix<f64>,
                ctil: &DVector<f64>,
                qtil: &DMatrix<f64>|
     -> Result<Derivs> {
        let dx = model.drift(t, x, u)?;
        let (a, b, c) = model.jacobians(t, x, u)?;
        let g = model.diffusion(t, x)?;
        let ggt = &g * g.transpose();
        Ok(Derivs {
            dphi: &a * phi,
            dbtil: &a * btil + b,
            dctil: &a * ctil + c,
            dqtil: &a * qtil + qtil * a.transpose() + ggt,
            dx,
        })
    };

    let mut t = t0;
    for _ in 0..n {
        let k1 = eval(t, &x, &phi, &btil, &ctil, &qtil)?;
        let half = 0.5 * h;
        let k2 = eval(
            t + half,
            &(&x + &k1.dx * half),
            &(&phi + &k1.dphi * half),
            &(&btil + &k1.dbtil * half),
            &(&ctil + &k1.dctil * half),
            &(&qtil + &k1.dqtil * half),
        )?;
        let k3 = eval(
            t + half,
            &(&x + &k2.dx * half),
            &(&phi + &k2.dphi * half),
            &(&btil + &k2.dbtil * half),
            &(&ctil + &k2.dctil * half),
            &(&qtil + &k2.dqtil * half),
        )?;
        let k4 = eval(
            t + h,
            &(&x + &k3.dx * h),
            &(&phi + &k3.dphi * h),
            &(&btil + &k3.dbtil * h),
            &(&ctil + &k3.dctil * h),
            &(&qtil + &k3.dqtil * h),
        )?;
        let w = h / 6.0;
        x += (k1.dx + k2.dx * 2.0 + k3.dx * 2.0 + k4.dx) * w;
        phi += (k1.dphi + k2.dphi * 2.0 + k3.dphi * 2.0 + k4.dphi) * w;
        btil += (k1.dbtil + k2.dbtil * 2.0 + k3.dbtil * 2.0 + k4.dbtil) * w;
        ctil += (k1.dctil + k2.dctil * 2.0 + k3.dctil * 2.0 + k4.dctil) * w;
        qtil += (k1.dqtil + k2.dqtil * 2.0 + k3.dqtil * 2.0 + k4.dqtil) * w;
        t += h;
    }

    // Symmetrize the accumulated noise covariance and factor it; integration
    // keeps it symmetric to roundoff, eigenvalue clamping handles the rest.
    let q_sym = (&qtil + qtil.transpose()) * 0.5;
    let scale = q_sym.norm().max(1.0);
    let (q, g) = clamp_and_factor(&q_sym, 1e-10 * scale)?;

    Ok(DiscreteSegment {
        a: phi,
        b: btil,
        c: ctil,
        q,
        g,
        t0,
        t1,
    })
}

/// Discretize every segment of the reference; segments are independent, so
/// they are processed in parallel.
pub fn discretize_all(
    model: &dyn Model,
    reference: &ReferenceTrajectory,
    substeps: usize,
) -> Result<Vec<DiscreteSegment>> {
    (0..reference.n_segments())
        .into_par_iter()
        .map(|k| discretize_segment(model, reference, k, substeps))
        .collect()
}

/// Eigendecomposition-based PSD factorization: G = V·diag(√λ₊) with negative
/// eigenvalues clamped to zero. Errors if the most negative eigenvalue is
/// beyond `neg_tol` (the input was not a covariance).
fn clamp_and_factor(q: &DMatrix<f64>, neg_tol: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = q.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < -neg_tol {
        return Err(Error::IndefiniteMatrix {
            min_eig,
            tol: neg_tol,
        });
    }
    let n = q.nrows();
    let mut sqrt_vals = DVector::zeros(n);
    let mut clamped = DVector::zeros(n);
    for i in 0..n {
        let l = eig.eigenvalues[i].max(0.0);
        clamped[i] = l;
        sqrt_vals[i] = l.sqrt();
    }
    let g = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
    let q_psd = &eig.eigenvectors
        * DMatrix::from_diagonal(&clamped)
        * eig.eigenvectors.transpose();
    // Re-symmetrize after the eigenvector products.
    let q_psd = (&q_psd + q_psd.transpose()) * 0.5;
    Ok((q_psd, g))
}

/// Factor a symmetric PSD matrix as G Gᵀ = Q. Rejects asymmetric input and
/// matrices with an eigenvalue below −1e−8 (scaled); small negative
/// eigenvalues from roundoff are clamped to zero.
pub fn sqrt_factor(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if q.nrows() != q.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "sqrt_factor needs a square matrix, got {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    let asym = (q - q.transpose()).norm();
    if asym > 1e-9 * q.norm().max(1.0) {
        return Err(Error::DimensionMismatch(format!(
            "sqrt_factor input asymmetric by {asym:.3e}"
        )));
    }
    let q_sym = (q + q.transpose()) * 0.5;
    let (_, g) = clamp_and_factor(&q_sym, 1e-8)?;
    Ok(g)
}

/// Mean propagation under feedforwards alone:
/// x̄_{k+1} = A_k x̄_k + B_k F_k + c_k.
pub fn propagate_mean(
    segments: &[DiscreteSegment],
    x0: &DVector<f64>,
    feedforwards: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    if segments.len() != feedforwards.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} segments vs {} feedforwards",
            segments.len(),
            feedforwards.len()
        )));
    }
    let mut out = Vec::with_capacity(segments.len() + 1);
    out.push(x0.clone());
    for (seg, f) in segments.iter().zip(feedforwards) {
        let next = &seg.a * out.last().unwrap() + &seg.b * f + &seg.c;
        out.push(next);
    }
    Ok(out)
}

/// Closed-loop covariance propagation:
/// P_{k+1} = (A_k + B_k K_k) P_k (A_k + B_k K_k)ᵀ + Q_k, symmetrized.
pub fn propagate_covariance(
    segments: &[DiscreteSegment],
    p0: &DMatrix<f64>,
    gains: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    if segments.len() != gains.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} segments vs {} gains",
            segments.len(),
            gains.len()
        )));
    }
    let mut out = Vec::with_capacity(segments.len() + 1);
    out.push((p0 + p0.transpose()) * 0.5);
    for (seg, k_gain) in segments.iter().zip(gains) {
        let acl = &seg.a + &seg.b * k_gain;
        let p_next = &acl * out.last().unwrap() * acl.transpose() + &seg.q;
        out.push((&p_next + p_next.transpose()) * 0.5);
    }
    Ok(out)
}

/// Re-propagate the reference nonlinearly node-to-node (cascade): node k+1
/// becomes the RK4 flow of node k under control k. The result is
/// self-consistent with [`propagate_zoh`] by construction.
pub fn repropagate_reference(
    model: &dyn Model,
    reference: &ReferenceTrajectory,
    substeps: usize,
) -> Result<ReferenceTrajectory> {
    let mut states = Vec::with_capacity(reference.states.len());
    states.push(reference.states[0].clone());
    for k in 0..reference.n_segments() {
        let next = propagate_zoh(
            model,
            states.last().unwrap(),
            &reference.controls[k],
            reference.times[k],
            reference.times[k + 1],
            substeps,
        )?;
        states.push(next);
    }
    ReferenceTrajectory::new(reference.times.clone(), states, reference.controls.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{FullModel, PhysicalParams};
    use crate::scale::ScaleSet;
    use approx::assert_relative_eq;

    /// Constant linear test model ẋ = A x + B u + c with diffusion G.
    struct LinearModel {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DVector<f64>,
        g: DMatrix<f64>,
    }

    impl Model for LinearModel {
        fn n_x(&self) -> usize {
            self.a.nrows()
        }
        fn n_u(&self) -> usize {
            self.b.ncols()
        }
        fn n_w(&self) -> usize {
            self.g.ncols()
        }
        fn dim(&self) -> usize {
            self.a.nrows() / 2
        }
        fn drift(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> crate::error::Result<DVector<f64>> {
            Ok(&self.a * x + &self.b * u + &self.c)
        }
        fn jacobians(
            &self,
            _t: f64,
            _x: &DVector<f64>,
            _u: &DVector<f64>,
        ) -> crate::error::Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
            Ok((self.a.clone(), self.b.clone(), self.c.clone()))
        }
        fn diffusion(&self, _t: f64, _x: &DVector<f64>) -> crate::error::Result<DMatrix<f64>> {
            Ok(self.g.clone())
        }
        fn mass_of(&self, _t: f64, _x: &DVector<f64>) -> f64 {
            1.0
        }
    }

    fn double_integrator(sigma: f64) -> LinearModel {
        LinearModel {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            c: DVector::zeros(2),
            g: DMatrix::from_row_slice(2, 1, &[0.0, sigma]),
        }
    }

    fn one_segment_ref(n_x: usize, n_u: usize, h: f64) -> ReferenceTrajectory {
        ReferenceTrajectory::new(
            vec![0.0, h],
            vec![DVector::zeros(n_x), DVector::zeros(n_x)],
            vec![DVector::zeros(n_u)],
        )
        .unwrap()
    }

    #[test]
    fn double_integrator_matches_closed_form() {
        // Closed form over a step h: A_k = [[1,h],[0,1]], B_k = [h²/2; h],
        // Q_k = σ²[[h³/3, h²/2],[h²/2, h]].
        let h = 0.25;
        let sigma = 0.7;
        let model = double_integrator(sigma);
        let seg = discretize_segment(&model, &one_segment_ref(2, 1, h), 0, 32).unwrap();
        let tol = 1e-10;
        assert_relative_eq!(seg.a[(0, 0)], 1.0, epsilon = tol);
        assert_relative_eq!(seg.a[(0, 1)], h, epsilon = tol);
        assert_relative_eq!(seg.a[(1, 0)], 0.0, epsilon = tol);
        assert_relative_eq!(seg.a[(1, 1)], 1.0, epsilon = tol);
        assert_relative_eq!(seg.b[(0, 0)], h * h / 2.0, epsilon = tol);
        assert_relative_eq!(seg.b[(1, 0)], h, epsilon = tol);
        assert!(seg.c.norm() < tol);
        let s2 = sigma * sigma;
        assert_relative_eq!(seg.q[(0, 0)], s2 * h.powi(3) / 3.0, epsilon = tol);
        assert_relative_eq!(seg.q[(0, 1)], s2 * h * h / 2.0, epsilon = tol);
        assert_relative_eq!(seg.q[(1, 1)], s2 * h, epsilon = tol);
        // Factor reconstructs the covariance.
        assert!(((&seg.g * seg.g.transpose()) - &seg.q).norm() < 1e-12);
    }

    #[test]
    fn zero_dynamics_discretizes_to_identity() {
        let model = LinearModel {
            a: DMatrix::zeros(2, 2),
            b: DMatrix::zeros(2, 1),
            c: DVector::zeros(2),
            g: DMatrix::zeros(2, 1),
        };
        let seg = discretize_segment(&model, &one_segment_ref(2, 1, 1.0), 0, 8).unwrap();
        assert!((seg.a - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
        assert!(seg.b.norm() < 1e-14);
        assert!(seg.c.norm() < 1e-14);
        assert!(seg.q.norm() < 1e-14);
    }

    fn kepler_model_2d() -> FullModel {
        let scales = ScaleSet::canonical(1.3271e11, 5000.0).unwrap();
        let p = PhysicalParams {
            mu: 1.3271e11,
            isp: 3000.0,
            g0: 9.80665e-3,
            u_max: 5.0e-3,
            gamma: 9e-5,
            n_w: 2,
        }
        .nondimensionalize(&scales);
        FullModel::new(p, 2).unwrap()
    }

    fn kepler_reference() -> ReferenceTrajectory {
        let x0 = DVector::from_vec(vec![1.0, 0.0, 0.1, 1.0, 1.0]);
        let u = DVector::from_vec(vec![0.05, 0.02]);
        ReferenceTrajectory::new(
            vec![0.0, 0.15],
            vec![x0.clone(), x0],
            vec![u],
        )
        .unwrap()
    }

    #[test]
    fn transition_matrix_predicts_nonlinear_perturbations_to_first_order() {
        // Propagate the nonlinear drift from x̂ and from x̂ + δ; the defect
        // against A_k·δ must shrink quadratically with δ.
        let model = kepler_model_2d();
        let reference = kepler_reference();
        let seg = discretize_segment(&model, &reference, 0, 32).unwrap();
        let u = &reference.controls[0];
        let base =
            propagate_zoh(&model, &reference.states[0], u, 0.0, 0.15, 32).unwrap();
        let dir = DVector::from_vec(vec![1.0, -0.5, 0.3, 0.2, -0.4]).normalize();
        let mut defects = Vec::new();
        for &eps in &[1e-4, 5e-5] {
            let x_pert = &reference.states[0] + &dir * eps;
            let pert = propagate_zoh(&model, &x_pert, u, 0.0, 0.15, 32).unwrap();
            let defect = (&pert - &base - &seg.a * (&dir * eps)).norm();
            defects.push(defect);
        }
        let ratio = defects[0] / defects[1];
        assert!(
            (3.0..5.0).contains(&ratio),
            "defect ratio {ratio} not quadratic (defects {defects:?})"
        );
    }

    #[test]
    fn refining_substeps_changes_results_below_tolerance() {
        let model = kepler_model_2d();
        let reference = kepler_reference();
        let coarse = discretize_segment(&model, &reference, 0, 32).unwrap();
        let fine = discretize_segment(&model, &reference, 0, 64).unwrap();
        let rel = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x - y).norm() / y.norm().max(1.0);
        assert!(rel(&coarse.a, &fine.a) <= 1e-8);
        assert!(rel(&coarse.b, &fine.b) <= 1e-8);
        assert!((&coarse.c - &fine.c).norm() / fine.c.norm().max(1.0) <= 1e-8);
        assert!(rel(&coarse.q, &fine.q) <= 1e-8);
    }

    #[test]
    fn mass_row_of_noise_covariance_is_exactly_zero() {
        // The drift's mass row does not depend on the state and the diffusion
        // has no mass row, so the discrete noise cannot move the mass.
        let model = kepler_model_2d();
        let seg = discretize_segment(&model, &kepler_reference(), 0, 32).unwrap();
        for j in 0..5 {
            assert_eq!(seg.q[(4, j)], 0.0, "Q mass row leaked at column {j}");
        }
    }

    #[test]
    fn transition_matrices_stay_invertible_on_kepler_segments() {
        let model = kepler_model_2d();
        let x0 = DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0]);
        let times: Vec<f64> = (0..=8).map(|i| 0.2 * i as f64).collect();
        let mut states = vec![x0.clone()];
        let u = DVector::from_vec(vec![0.03, -0.01]);
        for k in 0..8 {
            let next = propagate_zoh(&model, states.last().unwrap(), &u, times[k], times[k + 1], 32)
                .unwrap();
            states.push(next);
        }
        let reference = ReferenceTrajectory::new(times, states, vec![u; 8]).unwrap();
        for seg in discretize_all(&model, &reference, 32).unwrap() {
            let det = seg.a.determinant();
            assert!(det.is_finite() && det > 0.0, "det(A_k) = {det}");
        }
    }

    #[test]
    fn sqrt_factor_identity_zero_and_reconstruction() {
        let g = sqrt_factor(&DMatrix::identity(3, 3)).unwrap();
        assert!(((&g * g.transpose()) - DMatrix::<f64>::identity(3, 3)).norm() < 1e-12);
        let z = sqrt_factor(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(z.norm(), 0.0);
        let h = 0.25f64;
        let s2 = 0.49;
        let q = DMatrix::from_row_slice(
            2,
            2,
            &[
                s2 * h.powi(3) / 3.0,
                s2 * h * h / 2.0,
                s2 * h * h / 2.0,
                s2 * h,
            ],
        );
        let g = sqrt_factor(&q).unwrap();
        assert!(((&g * g.transpose()) - &q).norm() < 1e-12);
    }

    #[test]
    fn sqrt_factor_rejects_indefinite() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(matches!(
            sqrt_factor(&q),
            Err(Error::IndefiniteMatrix { .. })
        ));
    }

    #[test]
    fn mean_propagation_trivial_cases() {
        let h = 0.5;
        let model = double_integrator(0.0);
        let seg = discretize_segment(&model, &one_segment_ref(2, 1, h), 0, 16).unwrap();
        let segments = vec![seg.clone(), seg.clone(), seg];
        // Zero feedforward: pure transition-matrix product.
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let means = propagate_mean(&segments, &x0, &vec![DVector::zeros(1); 3]).unwrap();
        let mut expect = x0.clone();
        for seg in &segments {
            expect = &seg.a * expect;
        }
        assert!((means.last().unwrap() - expect).norm() < 1e-12);
        // Constant feedforward: matches r(t) = r0 + v0 t + F t²/2 at nodes.
        let f = DVector::from_vec(vec![0.3]);
        let means = propagate_mean(&segments, &x0, &vec![f.clone(); 3]).unwrap();
        for (k, m) in means.iter().enumerate() {
            let t = h * k as f64;
            assert_relative_eq!(m[0], 1.0 - 2.0 * t + 0.3 * t * t / 2.0, epsilon = 1e-12);
            assert_relative_eq!(m[1], -2.0 + 0.3 * t, epsilon = 1e-12);
        }
    }

    #[test]
    fn covariance_propagation_matches_telescoping_sum() {
        // Scalar system a = 1, q = 1, K = 0, P₀ = 0 gives P_k = k.
        let seg = DiscreteSegment {
            a: DMatrix::identity(1, 1),
            b: DMatrix::zeros(1, 1),
            c: DVector::zeros(1),
            q: DMatrix::identity(1, 1),
            g: DMatrix::identity(1, 1),
            t0: 0.0,
            t1: 1.0,
        };
        let segments = vec![seg; 5];
        let gains = vec![DMatrix::zeros(1, 1); 5];
        let covs = propagate_covariance(&segments, &DMatrix::zeros(1, 1), &gains).unwrap();
        for (k, p) in covs.iter().enumerate() {
            assert_relative_eq!(p[(0, 0)], k as f64, epsilon = 1e-14);
        }
    }

    #[test]
    fn covariance_propagation_is_symmetric_and_open_loop_without_gain() {
        let h = 0.4;
        let model = double_integrator(0.8);
        let seg = discretize_segment(&model, &one_segment_ref(2, 1, h), 0, 32).unwrap();
        let p0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let covs =
            propagate_covariance(&[seg.clone()], &p0, &[DMatrix::zeros(1, 2)]).unwrap();
        let expect = &seg.a * &p0 * seg.a.transpose() + &seg.q;
        assert!((&covs[1] - &expect).norm() < 1e-12);
        assert!((&covs[1] - covs[1].transpose()).norm() < 1e-13);
    }

    #[test]
    fn reference_validation_catches_bad_rows() {
        let mk = |times: Vec<f64>| {
            ReferenceTrajectory::new(
                times,
                vec![
                    DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0]),
                    DVector::from_vec(vec![1.0, 0.1, 0.0, 1.0, 1.0]),
                ],
                vec![DVector::zeros(2)],
            )
        };
        assert!(mk(vec![0.0, 1.0]).is_ok());
        assert!(mk(vec![1.0, 0.0]).is_err());
        assert!(mk(vec![0.0, 0.0]).is_err());
    }
}
