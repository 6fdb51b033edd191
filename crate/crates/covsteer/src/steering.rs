//! Covariance-steering optimizer: builds the per-iteration semidefinite
//! subproblem from discretized segments, runs the penalty-scheduled
//! successive-convexification loop, and recovers the feedback gains.
//!
//! The decision variables per segment are the mean `x̄_k`, feedforward `F_k`,
//! state covariance `P_k`, the auxiliary products `U_k = K_k P_k` and
//! `Y_k = K_k P_k K_kᵀ`, the feedback-magnitude bound `τ_k` with
//! `λ_max(Y_k) ≤ τ_k²` (linearized about `τ̂_k`), and the slack `ζ_k` that keeps
//! early iterations feasible. Coupling between `P`, `U`, `Y` is enforced by
//! the Schur block `[[P, Uᵀ], [U, Y]] ⪰ 0`.
//!
//! Inside the subproblem the covariance-like variables are stored with a
//! conditioning factor: `P' = d²P`, `U' = d²U`, `Y' = d²Y`, `τ' = dτ`,
//! `ζ' = d²ζ`. Cost coefficients undo the factor where the objective is
//! physical, and the slack tolerance/penalty act on the scaled `ζ'` (the
//! solver's own slack), which is what the convergence test reads.

use nalgebra::{DMatrix, DVector};

use crate::conic::{
    self, pack_sym, svec_index, svec_len, unpack_sym, AffineExpr, ConicProgram, SolveStatus,
    SolverSettings,
};
use crate::discretize::{discretize_all, DiscreteSegment, ReferenceTrajectory};
use crate::dynamics::{FrozenMassModel, FullModel, MassProfile, Model};
use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::stats::chi2_quantile_sqrt;

/// Lower bound kept on the linearization reference τ̂ between iterations so
/// the feedback-bound constraint never degenerates to `λ_max(Y) ≤ ζ`.
const TAU_HAT_FLOOR: f64 = 1e-9;

/// Semantics of the terminal covariance condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalCovarianceMode {
    /// `P_N ⪯ P_f` as a PSD constraint (default; the boundary covariance is
    /// a tolerance the arrival dispersion must fit inside).
    UpperBound,
    /// `P_N = P_f` exactly.
    Equality,
    /// `P_N = P_f` on the position/velocity block only; the remaining
    /// variances (the mass row, when the state carries one) are bounded
    /// above and their correlations left free.  This is the natural reading
    /// of a rendezvous: the arrival dispersion is a target to hit exactly,
    /// while the propellant dispersion merely has to stay within budget —
    /// full equality would force the solver to *inflate* mass scatter by
    /// deliberate thrust jitter, which is both wasteful and, on arcs flown
    /// at the thrust bound, infeasible.
    PosVelEquality,
}

/// Tuning knobs of the optimizer. Defaults reproduce the flight scenarios'
/// settings; scenario files may override every field.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Confidence level of the control-norm chance constraint.
    pub beta_u: f64,
    /// Quantile level used for the feedback term of the cost.
    pub p: f64,
    /// Trace-regularization weight on the control covariance.
    pub eps_y: f64,
    /// Relative mean-trajectory shift below which the loop stops.
    pub eps_x: f64,
    /// Slack level (on the scaled ζ') below which the relaxation is inactive.
    pub eps_zeta: f64,
    /// Covariance conditioning factor d.
    pub d: f64,
    /// Penalty weight at iteration 1.
    pub w_initial: f64,
    /// Multiplicative growth of the penalty weight per iteration.
    pub w_growth: f64,
    /// Saturation value of the penalty weight.
    pub w_cap: f64,
    pub max_iterations: usize,
    pub terminal_covariance: TerminalCovarianceMode,
    /// RK4 substeps per segment used by the discretizer.
    pub discretize_substeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            beta_u: 0.95,
            p: 0.95,
            eps_y: 0.01,
            eps_x: 5e-4,
            eps_zeta: 1e-6,
            d: 100.0,
            w_initial: 1e4,
            w_growth: 10.0,
            w_cap: 1e12,
            max_iterations: 30,
            terminal_covariance: TerminalCovarianceMode::UpperBound,
            discretize_substeps: 32,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter(msg.into()))
            }
        };
        check(
            self.beta_u > 0.0 && self.beta_u < 1.0,
            "beta_u must lie in (0, 1)",
        )?;
        check(self.p > 0.0 && self.p < 1.0, "p must lie in (0, 1)")?;
        check(self.eps_y > 0.0, "eps_Y must be positive")?;
        check(self.eps_x > 0.0, "eps_x must be positive")?;
        check(self.eps_zeta > 0.0, "eps_zeta must be positive")?;
        check(self.d > 0.0, "d must be positive")?;
        check(self.w_initial > 0.0, "w_initial must be positive")?;
        check(self.w_growth >= 1.0, "w_growth must be ≥ 1")?;
        check(self.w_cap >= self.w_initial, "w_cap must be ≥ w_initial")?;
        check(self.max_iterations >= 1, "max_iterations must be ≥ 1")?;
        check(
            self.discretize_substeps >= 1,
            "discretize_substeps must be ≥ 1",
        )?;
        Ok(())
    }

    /// Penalty weight at the given 1-based iteration:
    /// `w_initial · w_growth^{i−1}`, saturated at `w_cap`. The defaults give
    /// `min(10^{i+3}, 10¹²)`.
    pub fn penalty_weight(&self, iteration: usize) -> f64 {
        let i = iteration.max(1) as i32;
        (self.w_initial * self.w_growth.powi(i - 1)).min(self.w_cap)
    }
}

/// One solved iterate of the steering loop.
///
/// Means and feedforwards are in canonical (nondimensional) units. The
/// covariance-like fields keep the solver's conditioning factor: `cov` holds
/// `d²P_k`, `cross` holds `d²U_k`, `control_cov` holds `d²Y_k`, `tau` holds
/// `d·τ_k` and `zeta`/`tau_hat` likewise stay in the scaled domain. Use the
/// accessors on [`SteeringSolution`] for physical values.
#[derive(Clone, Debug)]
pub struct SteeringIterate {
    /// Node means, length N+1.
    pub mean: Vec<DVector<f64>>,
    /// Segment feedforwards, length N.
    pub feedforward: Vec<DVector<f64>>,
    /// Node state covariances (×d²), length N+1.
    pub cov: Vec<DMatrix<f64>>,
    /// Segment products U_k = K_k P_k (×d²), length N.
    pub cross: Vec<DMatrix<f64>>,
    /// Segment control covariances Y_k = K_k P_k K_kᵀ (×d²), length N.
    pub control_cov: Vec<DMatrix<f64>>,
    /// Segment feedback-magnitude bounds (×d), length N.
    pub tau: Vec<f64>,
    /// Segment slacks (×d²), length N.
    pub zeta: Vec<f64>,
    /// Linearization references for τ (×d), length N.
    pub tau_hat: Vec<f64>,
}

impl SteeringIterate {
    pub fn n_segments(&self) -> usize {
        self.feedforward.len()
    }
    pub fn n_x(&self) -> usize {
        self.mean[0].len()
    }
    pub fn n_u(&self) -> usize {
        self.feedforward.first().map_or(0, |f| f.len())
    }

    fn stacked_mean(&self) -> DVector<f64> {
        let n_x = self.n_x();
        let mut v = DVector::zeros(self.mean.len() * n_x);
        for (k, m) in self.mean.iter().enumerate() {
            v.rows_mut(k * n_x, n_x).copy_from(m);
        }
        v
    }
}

/// Outcome of the convergence test.
#[derive(Clone, Copy, Debug)]
pub struct ConvergenceMetrics {
    /// Relative shift of the stacked node means.
    pub mean_shift: f64,
    /// Largest slack (scaled domain).
    pub zeta_max: f64,
    pub converged: bool,
}

/// The loop stops when the stacked node means move by at most `eps_x`
/// relative to the previous iterate AND every slack is at most `eps_zeta`.
pub fn check_convergence(
    previous: &SteeringIterate,
    current: &SteeringIterate,
    config: &SolverConfig,
) -> Result<ConvergenceMetrics> {
    if previous.mean.len() != current.mean.len() || previous.n_x() != current.n_x() {
        return Err(Error::DimensionMismatch(format!(
            "iterates disagree: {} nodes of {} states vs {} nodes of {}",
            previous.mean.len(),
            previous.n_x(),
            current.mean.len(),
            current.n_x()
        )));
    }
    let prev = previous.stacked_mean();
    let prev_norm = prev.norm();
    if prev_norm == 0.0 {
        return Err(Error::InvalidReference(
            "previous mean trajectory has zero norm; relative shift undefined".into(),
        ));
    }
    let mean_shift = (current.stacked_mean() - prev).norm() / prev_norm;
    let zeta_max = current.zeta.iter().cloned().fold(0.0_f64, f64::max);
    Ok(ConvergenceMetrics {
        mean_shift,
        zeta_max,
        converged: mean_shift <= config.eps_x && zeta_max <= config.eps_zeta,
    })
}

/// Gain recovery `K_k = U_k P_k⁻¹`, requiring every segment covariance to be
/// numerically invertible (minimum eigenvalue above 1e−10 in the scaled
/// domain). Fails naming the first offending node. For iterates whose initial
/// covariance is legitimately singular (a deterministic component such as a
/// dispersion-free initial mass) the solver uses the pseudo-inverse variant
/// internally; the Schur coupling guarantees `null(P_k) ⊆ null(U_k)`, which
/// makes that recovery exact as well.
pub fn recover_gains(iterate: &SteeringIterate) -> Result<Vec<DMatrix<f64>>> {
    let mut gains = Vec::with_capacity(iterate.n_segments());
    for k in 0..iterate.n_segments() {
        let p = &iterate.cov[k];
        let eig = p.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if min_eig <= 1e-10 {
            return Err(Error::SingularCovariance { node: k, min_eig });
        }
        let inv = eig.recompose().try_inverse().ok_or(Error::SingularCovariance {
            node: k,
            min_eig,
        })?;
        gains.push(&iterate.cross[k] * inv);
    }
    Ok(gains)
}

/// Pseudo-inverse gain recovery: eigenvalues below `1e−8·λ_max` are treated
/// as exact zeros (directions with no dispersion receive no feedback).
fn recover_gains_pinv(iterate: &SteeringIterate) -> Vec<DMatrix<f64>> {
    let mut gains = Vec::with_capacity(iterate.n_segments());
    for k in 0..iterate.n_segments() {
        let p = &iterate.cov[k];
        let sym = (p + p.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let cut = 1e-8 * lam_max.max(f64::MIN_POSITIVE);
        let n = eig.eigenvalues.len();
        let mut pinv = DMatrix::zeros(n, n);
        for i in 0..n {
            let lam = eig.eigenvalues[i];
            if lam > cut {
                let v = eig.eigenvectors.column(i);
                pinv += v * v.transpose() / lam;
            }
        }
        gains.push(&iterate.cross[k] * pinv);
    }
    gains
}

/// Variable indexing of one assembled subproblem. All offsets are into a
/// single flat vector; covariance-like variables are stored in packed
/// triangular form (see [`pack_sym`]), the cross terms `U_k` entry-by-entry
/// in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct SubproblemLayout {
    pub n_x: usize,
    pub n_u: usize,
    pub n_segments: usize,
    pub off_mean: usize,
    pub off_feedforward: usize,
    pub off_thrust_epi: usize,
    pub off_cov: usize,
    pub off_cross: usize,
    pub off_control_cov: usize,
    pub off_tau: usize,
    pub off_zeta: usize,
    pub off_quad_epi: usize,
    pub n_vars: usize,
}

impl SubproblemLayout {
    pub fn new(n_x: usize, n_u: usize, n_segments: usize) -> Self {
        let n = n_segments;
        let sv_x = svec_len(n_x);
        let sv_u = svec_len(n_u);
        let off_mean = 0;
        let off_feedforward = off_mean + (n + 1) * n_x;
        let off_thrust_epi = off_feedforward + n * n_u;
        let off_cov = off_thrust_epi + n;
        let off_cross = off_cov + (n + 1) * sv_x;
        let off_control_cov = off_cross + n * n_u * n_x;
        let off_tau = off_control_cov + n * sv_u;
        let off_zeta = off_tau + n;
        let off_quad_epi = off_zeta + n;
        let n_vars = off_quad_epi + n;
        SubproblemLayout {
            n_x,
            n_u,
            n_segments,
            off_mean,
            off_feedforward,
            off_thrust_epi,
            off_cov,
            off_cross,
            off_control_cov,
            off_tau,
            off_zeta,
            off_quad_epi,
            n_vars,
        }
    }

    pub fn sv_x(&self) -> usize {
        svec_len(self.n_x)
    }
    pub fn sv_u(&self) -> usize {
        svec_len(self.n_u)
    }

    fn mean(&self, k: usize, i: usize) -> usize {
        self.off_mean + k * self.n_x + i
    }
    fn feedforward(&self, k: usize, j: usize) -> usize {
        self.off_feedforward + k * self.n_u + j
    }
    fn thrust_epi(&self, k: usize) -> usize {
        self.off_thrust_epi + k
    }
    /// Packed entry α of the node-k covariance.
    fn cov(&self, k: usize, alpha: usize) -> usize {
        self.off_cov + k * self.sv_x() + alpha
    }
    fn cross(&self, k: usize, r: usize, c: usize) -> usize {
        self.off_cross + (k * self.n_u + r) * self.n_x + c
    }
    fn control_cov(&self, k: usize, alpha: usize) -> usize {
        self.off_control_cov + k * self.sv_u() + alpha
    }
    fn tau(&self, k: usize) -> usize {
        self.off_tau + k
    }
    fn zeta(&self, k: usize) -> usize {
        self.off_zeta + k
    }
    fn quad_epi(&self, k: usize) -> usize {
        self.off_quad_epi + k
    }
}

/// Borrowed problem data for one subproblem: the discretization, boundary
/// distributions (canonical units, unscaled), and the thrust bound.
#[derive(Clone, Copy, Debug)]
pub struct SteeringProblem<'a> {
    pub segments: &'a [DiscreteSegment],
    /// Full initial mean (length n_x).
    pub x_i: &'a DVector<f64>,
    /// Terminal mean condition on the leading position/velocity rows only;
    /// its length says how many rows are pinned.
    pub x_f_posvel: &'a DVector<f64>,
    pub p_i: &'a DMatrix<f64>,
    pub p_f: &'a DMatrix<f64>,
    pub u_max: f64,
}

/// Assemble the conic subproblem about the linearization encoded in
/// `segments`, with feedback-bound references `tau_hat` (scaled by d) and
/// penalty weight `weight`.
///
/// Constraint families, in row order: initial mean, mean dynamics, terminal
/// mean, initial covariance, covariance recursion, (terminal covariance in
/// the equality modes — the full matrix or its position/velocity block);
/// then cones: per-segment thrust-norm SOC, the control chance bound, τ ≥ 0,
/// ζ ≥ 0, per-segment Schur PSD blocks, per-segment feedback-bound PSD
/// blocks, per-segment penalty SOCs, and the terminal covariance PSD block
/// in upper-bound mode (variance caps on the unpinned rows in
/// position/velocity-equality mode).
pub fn build_subproblem(
    problem: &SteeringProblem,
    tau_hat: &[f64],
    weight: f64,
    config: &SolverConfig,
) -> Result<(ConicProgram, SubproblemLayout)> {
    config.validate()?;
    let segments = problem.segments;
    if segments.is_empty() {
        return Err(Error::DimensionMismatch("no segments".into()));
    }
    let n = segments.len();
    let n_x = segments[0].a.nrows();
    let n_u = segments[0].b.ncols();
    for (k, seg) in segments.iter().enumerate() {
        if seg.a.nrows() != n_x || seg.a.ncols() != n_x || seg.b.nrows() != n_x
            || seg.b.ncols() != n_u || seg.c.len() != n_x || seg.q.nrows() != n_x
        {
            return Err(Error::DimensionMismatch(format!(
                "segment {k} matrices inconsistent with n_x = {n_x}, n_u = {n_u}"
            )));
        }
    }
    if problem.x_i.len() != n_x {
        return Err(Error::DimensionMismatch(format!(
            "initial mean has {} rows, state has {}",
            problem.x_i.len(),
            n_x
        )));
    }
    if problem.x_f_posvel.len() > n_x {
        return Err(Error::DimensionMismatch(format!(
            "terminal mean pins {} rows but the state has {}",
            problem.x_f_posvel.len(),
            n_x
        )));
    }
    if problem.p_i.nrows() != n_x || problem.p_f.nrows() != n_x {
        return Err(Error::DimensionMismatch(
            "boundary covariance size disagrees with the state".into(),
        ));
    }
    if tau_hat.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} tau references for {} segments",
            tau_hat.len(),
            n
        )));
    }
    if let Some(t) = tau_hat.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "tau references must be nonnegative, got {t}"
        )));
    }
    if !(weight >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "penalty weight must be nonnegative, got {weight}"
        )));
    }

    let layout = SubproblemLayout::new(n_x, n_u, n);
    let sv_x = layout.sv_x();
    let sv_u = layout.sv_u();
    let d = config.d;
    let d2 = d * d;
    let chi_u = chi2_quantile_sqrt(n_u, config.beta_u)?;
    let chi_p = chi2_quantile_sqrt(n_u, config.p)?;

    let mut prog = ConicProgram::new(layout.n_vars);

    // Objective: Σ_k ‖F_k‖ + (χ_p/d)·τ'_k + (ε_Y/d²)·tr Y'_k, which equals the
    // physical Σ ‖F‖ + χ_p τ + ε_Y tr Y; plus the slack penalty
    // Σ (1 + √w)·ζ'_k + (w/2)·q_k with q_k ≥ ζ'_k².
    let sqrt_w = weight.sqrt();
    for k in 0..n {
        prog.add_cost(layout.thrust_epi(k), 1.0)?;
        prog.add_cost(layout.tau(k), chi_p / d)?;
        for j in 0..n_u {
            prog.add_cost(layout.control_cov(k, svec_index(j, j)), config.eps_y / d2)?;
        }
        prog.add_cost(layout.zeta(k), 1.0 + sqrt_w)?;
        prog.add_cost(layout.quad_epi(k), weight / 2.0)?;
    }

    // Initial mean.
    for i in 0..n_x {
        prog.add_equality(AffineExpr::term(layout.mean(0, i), 1.0), problem.x_i[i])?;
    }
    // Mean dynamics x̄_{k+1} = A_k x̄_k + B_k F_k + c_k.
    for (k, seg) in segments.iter().enumerate() {
        for i in 0..n_x {
            let mut e = AffineExpr::term(layout.mean(k + 1, i), 1.0);
            for j in 0..n_x {
                e.push(layout.mean(k, j), -seg.a[(i, j)]);
            }
            for j in 0..n_u {
                e.push(layout.feedforward(k, j), -seg.b[(i, j)]);
            }
            prog.add_equality(e, seg.c[i])?;
        }
    }
    // Terminal mean on the pinned leading rows (the mass mean, when present,
    // is an outcome of the optimization).
    for i in 0..problem.x_f_posvel.len() {
        prog.add_equality(
            AffineExpr::term(layout.mean(n, i), 1.0),
            problem.x_f_posvel[i],
        )?;
    }
    // Initial covariance P'_0 = d²·P_i.
    let p_i_packed = pack_sym(&(problem.p_i * d2));
    for (alpha, rhs) in p_i_packed.iter().enumerate() {
        prog.add_equality(AffineExpr::term(layout.cov(0, alpha), 1.0), *rhs)?;
    }
    // Covariance recursion, one packed row per entry:
    // P'_{k+1} = A P' Aᵀ + A U'ᵀ Bᵀ + B U' Aᵀ + B Y' Bᵀ + d²·Q_k.
    // Columns of the linear maps are congruences of packed basis matrices.
    for (k, seg) in segments.iter().enumerate() {
        let a = &seg.a;
        let b = &seg.b;
        let mut la = DMatrix::zeros(sv_x, sv_x);
        let mut basis = vec![0.0; sv_x];
        for alpha in 0..sv_x {
            basis[alpha] = 1.0;
            let ebar = unpack_sym(&basis, n_x);
            basis[alpha] = 0.0;
            let m = a * ebar * a.transpose();
            let col = pack_sym(&((&m + m.transpose()) * 0.5));
            for (beta, v) in col.iter().enumerate() {
                la[(beta, alpha)] = *v;
            }
        }
        let mut lu = DMatrix::zeros(sv_x, n_u * n_x);
        for r in 0..n_u {
            let b_r = b.column(r);
            for c in 0..n_x {
                let a_c = a.column(c);
                let m = &a_c * b_r.transpose() + &b_r * a_c.transpose();
                let col = pack_sym(&m);
                for (beta, v) in col.iter().enumerate() {
                    lu[(beta, r * n_x + c)] = *v;
                }
            }
        }
        let mut ly = DMatrix::zeros(sv_x, sv_u);
        let mut basis_u = vec![0.0; sv_u];
        for alpha in 0..sv_u {
            basis_u[alpha] = 1.0;
            let ebar = unpack_sym(&basis_u, n_u);
            basis_u[alpha] = 0.0;
            let m = b * ebar * b.transpose();
            let col = pack_sym(&((&m + m.transpose()) * 0.5));
            for (beta, v) in col.iter().enumerate() {
                ly[(beta, alpha)] = *v;
            }
        }
        let q_packed = pack_sym(&(&seg.q * d2));
        for beta in 0..sv_x {
            let mut e = AffineExpr::term(layout.cov(k + 1, beta), 1.0);
            for alpha in 0..sv_x {
                e.push(layout.cov(k, alpha), -la[(beta, alpha)]);
            }
            for r in 0..n_u {
                for c in 0..n_x {
                    e.push(layout.cross(k, r, c), -lu[(beta, r * n_x + c)]);
                }
            }
            for alpha in 0..sv_u {
                e.push(layout.control_cov(k, alpha), -ly[(beta, alpha)]);
            }
            prog.add_equality(e, q_packed[beta])?;
        }
    }
    let n_pv = problem.x_f_posvel.len();
    match config.terminal_covariance {
        TerminalCovarianceMode::Equality => {
            let p_f_packed = pack_sym(&(problem.p_f * d2));
            for (alpha, rhs) in p_f_packed.iter().enumerate() {
                prog.add_equality(AffineExpr::term(layout.cov(n, alpha), 1.0), *rhs)?;
            }
        }
        TerminalCovarianceMode::PosVelEquality => {
            let p_f_packed = pack_sym(&(problem.p_f * d2));
            for j in 0..n_pv {
                for i in 0..=j {
                    let alpha = svec_index(i, j);
                    prog.add_equality(
                        AffineExpr::term(layout.cov(n, alpha), 1.0),
                        p_f_packed[alpha],
                    )?;
                }
            }
        }
        TerminalCovarianceMode::UpperBound => {}
    }

    // Thrust-norm epigraphs ‖F_k‖ ≤ tF_k.
    for k in 0..n {
        let mut rows = Vec::with_capacity(1 + n_u);
        rows.push(AffineExpr::term(layout.thrust_epi(k), 1.0));
        for j in 0..n_u {
            rows.push(AffineExpr::term(layout.feedforward(k, j), 1.0));
        }
        prog.add_soc(rows)?;
    }
    // Control chance bound tF_k + χ_u·τ_k ≤ u_max.
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let mut e = AffineExpr::constant(problem.u_max);
        e.push(layout.thrust_epi(k), -1.0);
        e.push(layout.tau(k), -chi_u / d);
        rows.push(e);
    }
    prog.add_nonneg(rows)?;
    prog.add_nonneg((0..n).map(|k| AffineExpr::term(layout.tau(k), 1.0)).collect())?;
    prog.add_nonneg((0..n).map(|k| AffineExpr::term(layout.zeta(k), 1.0)).collect())?;
    // Schur coupling [[P', U'ᵀ], [U', Y']] ⪰ 0 per segment.
    let side = n_x + n_u;
    for k in 0..n {
        let mut rows = Vec::with_capacity(svec_len(side));
        for j in 0..side {
            for i in 0..=j {
                let e = if j < n_x {
                    AffineExpr::term(layout.cov(k, svec_index(i, j)), 1.0)
                } else if i < n_x {
                    // Off-diagonal block: packed rows carry √2 times the
                    // matrix entry U'_{j−n_x, i}.
                    AffineExpr::term(layout.cross(k, j - n_x, i), std::f64::consts::SQRT_2)
                } else {
                    AffineExpr::term(layout.control_cov(k, svec_index(i - n_x, j - n_x)), 1.0)
                };
                rows.push(e);
            }
        }
        prog.add_psd(side, rows)?;
    }
    // Feedback bound linearized about τ̂:
    // (2τ̂'τ' − τ̂'² + ζ')·I − Y' ⪰ 0.
    for k in 0..n {
        let th = tau_hat[k];
        let mut rows = Vec::with_capacity(sv_u);
        for j in 0..n_u {
            for i in 0..=j {
                let mut e = AffineExpr::term(layout.control_cov(k, svec_index(i, j)), -1.0);
                if i == j {
                    e.push(layout.tau(k), 2.0 * th);
                    e.push(layout.zeta(k), 1.0);
                    e.constant = -th * th;
                }
                rows.push(e);
            }
        }
        prog.add_psd(n_u, rows)?;
    }
    // Penalty epigraphs q_k ≥ ζ'_k² as ‖(ζ', (q−1)/2)‖ ≤ (q+1)/2.
    for k in 0..n {
        let mut top = AffineExpr::term(layout.quad_epi(k), 0.5);
        top.constant = 0.5;
        let mut bottom = AffineExpr::term(layout.quad_epi(k), 0.5);
        bottom.constant = -0.5;
        prog.add_soc(vec![top, AffineExpr::term(layout.zeta(k), 1.0), bottom])?;
    }
    match config.terminal_covariance {
        TerminalCovarianceMode::UpperBound => {
            let p_f_packed = pack_sym(&(problem.p_f * d2));
            let rows = (0..sv_x)
                .map(|alpha| {
                    let mut e = AffineExpr::term(layout.cov(n, alpha), -1.0);
                    e.constant = p_f_packed[alpha];
                    e
                })
                .collect();
            prog.add_psd(n_x, rows)?;
        }
        TerminalCovarianceMode::PosVelEquality if n_pv < n_x => {
            // Variance caps on the rows outside the pinned block.
            let p_f_packed = pack_sym(&(problem.p_f * d2));
            let rows = (n_pv..n_x)
                .map(|j| {
                    let alpha = svec_index(j, j);
                    let mut e = AffineExpr::term(layout.cov(n, alpha), -1.0);
                    e.constant = p_f_packed[alpha];
                    e
                })
                .collect();
            prog.add_nonneg(rows)?;
        }
        _ => {}
    }

    Ok((prog, layout))
}

/// Read one solved iterate back out of the flat solution vector.
///
/// The feedback-bound variable is tightened to the magnitude the iterate
/// actually achieves, `τ'_k = min(τ'_k, √λ_max(Y'_k))`: the epigraph value
/// can stay at the linearization point's scale when the true feedback is
/// already far below it (a noiseless problem drives Y to zero while τ only
/// halves per pass), and every consumer wants the achieved bound, not the
/// search artifact.  Tightening never loosens the control-norm constraint
/// and keeps `τ'² + ζ' ≥ λ_max(Y')` intact.
fn extract_iterate(layout: &SubproblemLayout, x: &[f64], tau_hat: &[f64]) -> SteeringIterate {
    let n = layout.n_segments;
    let n_x = layout.n_x;
    let n_u = layout.n_u;
    let sv_x = layout.sv_x();
    let sv_u = layout.sv_u();
    let mean = (0..=n)
        .map(|k| DVector::from_fn(n_x, |i, _| x[layout.mean(k, i)]))
        .collect();
    let feedforward = (0..n)
        .map(|k| DVector::from_fn(n_u, |j, _| x[layout.feedforward(k, j)]))
        .collect();
    let cov = (0..=n)
        .map(|k| {
            let start = layout.cov(k, 0);
            unpack_sym(&x[start..start + sv_x], n_x)
        })
        .collect();
    let cross = (0..n)
        .map(|k| DMatrix::from_fn(n_u, n_x, |r, c, | x[layout.cross(k, r, c)]))
        .collect();
    let control_cov: Vec<DMatrix<f64>> = (0..n)
        .map(|k| {
            let start = layout.control_cov(k, 0);
            unpack_sym(&x[start..start + sv_u], n_u)
        })
        .collect();
    let tau = (0..n)
        .map(|k| {
            let lam = control_cov[k]
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .max()
                .max(0.0);
            x[layout.tau(k)].min(lam.sqrt())
        })
        .collect();
    SteeringIterate {
        mean,
        feedforward,
        cov,
        cross,
        control_cov,
        tau,
        zeta: (0..n).map(|k| x[layout.zeta(k)]).collect(),
        tau_hat: tau_hat.to_vec(),
    }
}

/// The two reported objective pieces at an iterate: the physical cost
/// (thrust + feedback quantile + trace regularization, canonical units) and
/// the slack penalty as optimized (scaled domain).
fn objective_terms(iterate: &SteeringIterate, weight: f64, config: &SolverConfig) -> (f64, f64) {
    let d = config.d;
    let d2 = d * d;
    let chi_p = chi2_quantile_sqrt(iterate.n_u().max(1), config.p).unwrap_or(0.0);
    let mut j3 = 0.0;
    let mut j_pen = 0.0;
    let sqrt_w = weight.sqrt();
    for k in 0..iterate.n_segments() {
        j3 += iterate.feedforward[k].norm();
        j3 += chi_p * iterate.tau[k] / d;
        j3 += config.eps_y * iterate.control_cov[k].trace() / d2;
        let z = iterate.zeta[k].max(0.0);
        j_pen += z + 0.5 * weight * z * z + sqrt_w * z;
    }
    (j3, j_pen)
}

/// One line of the iteration history.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iteration: usize,
    pub weight: f64,
    pub j3: f64,
    pub j_pen: f64,
    pub j_aug: f64,
    /// Largest slack (scaled domain).
    pub zeta_max: f64,
    /// Relative shift of the stacked node means vs. the previous iterate.
    pub mean_shift: f64,
    pub status: SolveStatus,
    pub solver_iterations: usize,
    pub solve_time: f64,
}

impl IterationRecord {
    /// Column names of [`IterationRecord::log_line`], tab-separated.
    pub const LOG_HEADER: &'static str = "iteration\tw\tJ3\tJ_pen\tzeta_max\tmean_shift\tstatus";

    /// Stable tab-separated representation used for the iteration log.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.3e}\t{:.9e}\t{:.9e}\t{:.3e}\t{:.3e}\t{}",
            self.iteration,
            self.weight,
            self.j3,
            self.j_pen,
            self.zeta_max,
            self.mean_shift,
            self.status
        )
    }
}

/// Constraint-satisfaction summary of a solved iterate, measured against the
/// subproblem that produced it. All quantities are in the scaled solver
/// domain except `control_slack_min`, which is in canonical thrust units.
#[derive(Clone, Copy, Debug)]
pub struct Certification {
    /// Minimum eigenvalue over all Schur blocks (≥ −1e−7 at a valid iterate).
    pub schur_min_eig: f64,
    /// Largest Frobenius defect of the covariance recursion.
    pub recursion_residual: f64,
    /// Minimum of u_max − ‖F_k‖ − χ_u·τ_k.
    pub control_slack_min: f64,
    /// Minimum of (τ'² + ζ') − λ_max(Y') over segments: the exact
    /// feedback-magnitude bound the control constraint relies on.
    pub feedback_bound_slack_min: f64,
    /// Largest slack variable.
    pub zeta_max: f64,
    /// Largest ‖K_k P'_k − U'_k‖_F over segments.
    pub gain_residual: f64,
}

/// A converged steering solution plus its provenance: the final iterate, the
/// gains, the discretization it was solved against, and the full history.
#[derive(Clone, Debug)]
pub struct SteeringSolution {
    /// Node times, canonical units, length N+1.
    pub times: Vec<f64>,
    /// Final iterate (covariances carry the d² conditioning factor).
    pub iterate: SteeringIterate,
    /// Feedback gains K_k (canonical; the conditioning factor cancels).
    pub gains: Vec<DMatrix<f64>>,
    /// The discretization the final iterate was solved against.
    pub segments: Vec<DiscreteSegment>,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations: usize,
    /// Physical cost at the final iterate.
    pub j3: f64,
    /// Slack penalty at the final iterate (scaled domain).
    pub j_pen: f64,
    pub config: SolverConfig,
    /// Thrust bound in canonical units.
    pub u_max: f64,
    pub mass_stochastic: bool,
    /// Position/velocity dimension (2 or 3).
    pub dim: usize,
}

impl SteeringSolution {
    pub fn n_segments(&self) -> usize {
        self.iterate.n_segments()
    }
    pub fn n_x(&self) -> usize {
        self.iterate.n_x()
    }
    pub fn n_u(&self) -> usize {
        self.iterate.n_u()
    }

    /// Node covariance with the conditioning factor removed (canonical units).
    pub fn covariance(&self, k: usize) -> DMatrix<f64> {
        &self.iterate.cov[k] / (self.config.d * self.config.d)
    }

    /// Control covariance Y_k with the conditioning factor removed.
    pub fn control_covariance(&self, k: usize) -> DMatrix<f64> {
        &self.iterate.control_cov[k] / (self.config.d * self.config.d)
    }

    /// Cross term U_k = K_k P_k with the conditioning factor removed.
    pub fn cross_term(&self, k: usize) -> DMatrix<f64> {
        &self.iterate.cross[k] / (self.config.d * self.config.d)
    }

    /// Feedback-magnitude bound τ_k (canonical units).
    pub fn tau(&self, k: usize) -> f64 {
        self.iterate.tau[k] / self.config.d
    }

    /// Mean mass at the final node (canonical units), when the state
    /// carries a mass component.
    pub fn final_mass(&self) -> Option<f64> {
        if self.n_x() == 2 * self.dim + 1 {
            Some(self.iterate.mean[self.n_segments()][self.n_x() - 1])
        } else {
            None
        }
    }

    /// The solution's mean trajectory and feedforward as a reference
    /// (canonical units) — the natural input for simulation or re-solving.
    pub fn reference(&self) -> ReferenceTrajectory {
        ReferenceTrajectory {
            times: self.times.clone(),
            states: self.iterate.mean.clone(),
            controls: self.iterate.feedforward.clone(),
        }
    }

    /// Measure constraint satisfaction of the final iterate against the
    /// stored discretization.
    pub fn certify(&self) -> Result<Certification> {
        let it = &self.iterate;
        let n = self.n_segments();
        let n_x = self.n_x();
        let n_u = self.n_u();
        let d = self.config.d;
        let d2 = d * d;
        let chi_u = chi2_quantile_sqrt(n_u, self.config.beta_u)?;
        let mut schur_min_eig = f64::INFINITY;
        let mut recursion_residual = 0.0_f64;
        let mut control_slack_min = f64::INFINITY;
        let mut feedback_slack_min = f64::INFINITY;
        let mut gain_residual = 0.0_f64;
        for k in 0..n {
            let p = &it.cov[k];
            let u = &it.cross[k];
            let y = &it.control_cov[k];
            let mut schur = DMatrix::zeros(n_x + n_u, n_x + n_u);
            schur.view_mut((0, 0), (n_x, n_x)).copy_from(p);
            schur.view_mut((n_x, 0), (n_u, n_x)).copy_from(u);
            schur.view_mut((0, n_x), (n_x, n_u)).copy_from(&u.transpose());
            schur.view_mut((n_x, n_x), (n_u, n_u)).copy_from(y);
            schur_min_eig = schur_min_eig.min(schur.symmetric_eigen().eigenvalues.min());

            let seg = &self.segments[k];
            let a = &seg.a;
            let b = &seg.b;
            let pred = a * p * a.transpose()
                + a * u.transpose() * b.transpose()
                + b * u * a.transpose()
                + b * y * b.transpose()
                + &seg.q * d2;
            recursion_residual = recursion_residual.max((&it.cov[k + 1] - pred).norm());

            control_slack_min = control_slack_min
                .min(self.u_max - it.feedforward[k].norm() - chi_u * it.tau[k] / d);

            // Exact feedback-magnitude certificate (not the linearized
            // surrogate the subproblem optimizes): τ'² + ζ' ≥ λ_max(Y').
            let bound = it.tau[k] * it.tau[k] + it.zeta[k];
            let lam_max = y.clone().symmetric_eigen().eigenvalues.max();
            feedback_slack_min = feedback_slack_min.min(bound - lam_max);

            gain_residual = gain_residual.max((&self.gains[k] * p - u).norm());
        }
        Ok(Certification {
            schur_min_eig,
            recursion_residual,
            control_slack_min,
            feedback_bound_slack_min: feedback_slack_min,
            zeta_max: it.zeta.iter().cloned().fold(0.0_f64, f64::max),
            gain_residual,
        })
    }
}

/// Run the full successive-convexification loop for a scenario, starting
/// from a reference trajectory in canonical units (normally the deterministic
/// minimum-fuel solution).
///
/// Per iteration: re-discretize about the current reference, assemble and
/// solve the subproblem at the scheduled penalty weight, measure the mean
/// shift and slack, then adopt the iterate as the next reference with
/// `τ̂ ← τ`. Stops at the first iterate passing [`check_convergence`]; a
/// failed subproblem or running out of iterations is an error.
pub fn scp_solve(
    scenario: &Scenario,
    reference: &ReferenceTrajectory,
    config: &SolverConfig,
) -> Result<SteeringSolution> {
    scenario.validate()?;
    config.validate()?;
    reference.validate()?;
    let scales = scenario.scales()?;
    let params = scenario.params.nondimensionalize(&scales);
    let dim = scenario.dim;
    let t_f = scales.scale_time(scenario.t_f);
    let t0 = reference.times[0];
    let t_end = *reference.times.last().unwrap();
    if t0.abs() > 1e-9 * t_f.max(1.0) || (t_end - t_f).abs() > 1e-6 * t_f {
        return Err(Error::InvalidReference(format!(
            "reference spans [{t0:.6e}, {t_end:.6e}] but the scenario flies [0, {t_f:.6e}] \
             (canonical time units)"
        )));
    }
    let full_n_x = 2 * dim + 1;
    if reference.states[0].len() != full_n_x {
        return Err(Error::InvalidReference(format!(
            "reference states have {} rows, scenario needs {full_n_x}",
            reference.states[0].len()
        )));
    }
    if reference.controls[0].len() != dim {
        return Err(Error::InvalidReference(format!(
            "reference controls have {} rows, scenario needs {dim}",
            reference.controls[0].len()
        )));
    }

    let full_x_i = scales.scale_state(&scenario.x_i(), dim);
    let full_p_i = scales.scale_state_cov(&scenario.p_i(), dim);
    let full_p_f = scales.scale_state_cov(&scenario.p_f(), dim);
    let x_f = scales.scale_state(&scenario.x_f_posvel(), dim);
    let m_i = scales.scale_mass(scenario.m_i);

    let (x_i, p_i, p_f, mut current_ref) = if scenario.mass_stochastic {
        (full_x_i, full_p_i, full_p_f, reference.clone())
    } else {
        let nr = 2 * dim;
        (
            full_x_i.rows(0, nr).into_owned(),
            full_p_i.view((0, 0), (nr, nr)).into_owned(),
            full_p_f.view((0, 0), (nr, nr)).into_owned(),
            reference.without_mass_row(),
        )
    };

    let n = current_ref.n_segments();
    let n_u = dim;
    let u_max = params.u_max;
    let chi_u = chi2_quantile_sqrt(n_u, config.beta_u)?;
    // Small positive start for the feedback-bound linearization: 5% of the
    // control authority allotted to feedback.
    let mut tau_hat = vec![config.d * 0.05 * u_max / chi_u; n];

    let settings = SolverSettings::default();
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut final_iterate: Option<SteeringIterate> = None;
    let mut final_segments: Option<Vec<DiscreteSegment>> = None;
    let mut converged = false;
    log::info!("{}", IterationRecord::LOG_HEADER);

    for i in 1..=config.max_iterations {
        let model: Box<dyn Model> = if scenario.mass_stochastic {
            Box::new(FullModel::new(params.clone(), dim)?)
        } else {
            // The frozen-mass comparison model: the profile is rebuilt from
            // the current feedforward every pass, so 1/m(t) tracks the
            // iterate exactly (ZOH makes the bookkeeping exact).
            let profile = MassProfile::from_feedforward(
                &current_ref.times,
                m_i,
                &current_ref.controls,
                &params,
            )?;
            Box::new(FrozenMassModel::new(params.clone(), dim, profile)?)
        };
        let segments = discretize_all(model.as_ref(), &current_ref, config.discretize_substeps)?;
        let weight = config.penalty_weight(i);
        let problem = SteeringProblem {
            segments: &segments,
            x_i: &x_i,
            x_f_posvel: &x_f,
            p_i: &p_i,
            p_f: &p_f,
            u_max,
        };
        let (prog, layout) = build_subproblem(&problem, &tau_hat, weight, config)?;
        let sol = conic::solve(&prog, &settings)?;
        if sol.status != SolveStatus::Optimal {
            return Err(Error::SubproblemFailed {
                iteration: i,
                status: sol.status.to_string(),
            });
        }
        let mut iterate = extract_iterate(&layout, &sol.x, &tau_hat);
        // The initial covariance is pinned by equality rows, but components
        // far below the interior-point feasibility tolerance (a 10 km
        // departure dispersion is ~1e-11 scaled) come back as solver noise
        // of either sign.  Re-impose the boundary value exactly.
        iterate.cov[0] = &p_i * (config.d * config.d);

        let prev = SteeringIterate {
            mean: current_ref.states.clone(),
            feedforward: current_ref.controls.clone(),
            cov: Vec::new(),
            cross: Vec::new(),
            control_cov: Vec::new(),
            tau: Vec::new(),
            zeta: Vec::new(),
            tau_hat: Vec::new(),
        };
        let metrics = check_convergence(&prev, &iterate, config)?;
        let (j3, j_pen) = objective_terms(&iterate, weight, config);
        let record = IterationRecord {
            iteration: i,
            weight,
            j3,
            j_pen,
            j_aug: j3 + j_pen,
            zeta_max: metrics.zeta_max,
            mean_shift: metrics.mean_shift,
            status: sol.status,
            solver_iterations: sol.iterations as usize,
            solve_time: sol.solve_time,
        };
        log::info!("{}", record.log_line());
        history.push(record);

        current_ref = ReferenceTrajectory {
            times: current_ref.times.clone(),
            states: iterate.mean.clone(),
            controls: iterate.feedforward.clone(),
        };
        for (th, t) in tau_hat.iter_mut().zip(&iterate.tau) {
            *th = t.max(TAU_HAT_FLOOR);
        }
        final_iterate = Some(iterate);
        final_segments = Some(segments);
        if metrics.converged {
            converged = true;
            break;
        }
    }

    let last = history.last().expect("at least one iteration ran");
    if !converged {
        return Err(Error::NotConverged {
            max_iterations: config.max_iterations,
            mean_shift: last.mean_shift,
            zeta_max: last.zeta_max,
        });
    }
    let (iterations, j3, j_pen) = (last.iteration, last.j3, last.j_pen);
    let iterate = final_iterate.expect("converged loop produced an iterate");
    let gains = recover_gains_pinv(&iterate);
    Ok(SteeringSolution {
        times: current_ref.times.clone(),
        gains,
        segments: final_segments.expect("converged loop kept its discretization"),
        history,
        converged,
        iterations,
        j3,
        j_pen,
        config: config.clone(),
        u_max,
        mass_stochastic: scenario.mass_stochastic,
        dim,
        iterate,
    })
}

/// Closed-form size census of the subproblem a given grid produces; the
/// numbers are computed from the layout formulas, independently of the
/// assembly code, so tests can cross-check the two.
#[derive(Clone, Debug)]
pub struct CensusReport {
    pub n_x: usize,
    pub n_u: usize,
    pub n_segments: usize,
    /// (group, variable count).
    pub variables: Vec<(String, usize)>,
    /// (group, equality-row count).
    pub equalities: Vec<(String, usize)>,
    /// (group, cone count, packed-row count).
    pub cones: Vec<(String, usize, usize)>,
}

impl CensusReport {
    pub fn total_variables(&self) -> usize {
        self.variables.iter().map(|(_, n)| n).sum()
    }
    pub fn total_equalities(&self) -> usize {
        self.equalities.iter().map(|(_, n)| n).sum()
    }
    pub fn total_cones(&self) -> usize {
        self.cones.iter().map(|(_, n, _)| n).sum()
    }
    pub fn total_cone_rows(&self) -> usize {
        self.cones.iter().map(|(_, _, r)| r).sum()
    }
}

impl std::fmt::Display for CensusReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "subproblem census: n_x = {}, n_u = {}, N = {}",
            self.n_x, self.n_u, self.n_segments
        )?;
        writeln!(f, "variables:")?;
        for (name, n) in &self.variables {
            writeln!(f, "  {name:<38} {n:>8}")?;
        }
        writeln!(f, "  {:<38} {:>8}", "total", self.total_variables())?;
        writeln!(f, "equality rows:")?;
        for (name, n) in &self.equalities {
            writeln!(f, "  {name:<38} {n:>8}")?;
        }
        writeln!(f, "  {:<38} {:>8}", "total", self.total_equalities())?;
        writeln!(f, "cones (count × packed rows):")?;
        for (name, n, rows) in &self.cones {
            writeln!(f, "  {name:<38} {n:>4} {rows:>8}")?;
        }
        write!(
            f,
            "  {:<38} {:>4} {:>8}",
            "total",
            self.total_cones(),
            self.total_cone_rows()
        )
    }
}

/// Count the variables, equality rows and cones the subproblem for a grid of
/// `n_segments` segments over a state of size `n_x` with `n_u` controls
/// will contain.
pub fn census(n_x: usize, n_u: usize, n_segments: usize, config: &SolverConfig) -> CensusReport {
    let n = n_segments;
    let sv_x = svec_len(n_x);
    let sv_u = svec_len(n_u);
    // With a mass component (odd state size) the terminal mean pins only the
    // position/velocity rows.
    let pinned = if n_x % 2 == 1 { n_x - 1 } else { n_x };
    let variables = vec![
        ("node means".into(), (n + 1) * n_x),
        ("feedforwards".into(), n * n_u),
        ("thrust-norm epigraphs".into(), n),
        ("state covariances (packed)".into(), (n + 1) * sv_x),
        ("cross terms U (entries)".into(), n * n_u * n_x),
        ("control covariances (packed)".into(), n * sv_u),
        ("feedback bounds tau".into(), n),
        ("slacks zeta".into(), n),
        ("penalty epigraphs".into(), n),
    ];
    let mut equalities = vec![
        ("initial mean".into(), n_x),
        ("mean dynamics".into(), n * n_x),
        ("terminal mean (position/velocity)".into(), pinned),
        ("initial covariance".into(), sv_x),
        ("covariance recursion".into(), n * sv_x),
    ];
    let side = n_x + n_u;
    let mut cones = vec![
        ("thrust-norm SOC".into(), n, n * (1 + n_u)),
        ("control chance bound (nonneg)".into(), 1, n),
        ("tau nonneg".into(), 1, n),
        ("zeta nonneg".into(), 1, n),
        ("Schur PSD".into(), n, n * svec_len(side)),
        ("feedback-bound PSD".into(), n, n * sv_u),
        ("penalty SOC".into(), n, 3 * n),
    ];
    match config.terminal_covariance {
        TerminalCovarianceMode::UpperBound => {
            cones.push(("terminal covariance PSD".into(), 1, sv_x));
        }
        TerminalCovarianceMode::Equality => {
            equalities.push(("terminal covariance".into(), sv_x));
        }
        TerminalCovarianceMode::PosVelEquality => {
            equalities.push(("terminal covariance (posvel block)".into(), svec_len(pinned)));
            if pinned < n_x {
                cones.push(("terminal variance caps (nonneg)".into(), 1, n_x - pinned));
            }
        }
    }
    CensusReport {
        n_x,
        n_u,
        n_segments: n,
        variables,
        equalities,
        cones,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{propagate_covariance, sqrt_factor};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn penalty_schedule_matches_formula() {
        let config = SolverConfig::default();
        assert_eq!(config.penalty_weight(1), 1e4);
        assert_eq!(config.penalty_weight(5), 1e8);
        assert_eq!(config.penalty_weight(9), 1e12);
        assert_eq!(config.penalty_weight(100), 1e12);
        // Nondecreasing along the whole schedule.
        for i in 1..40 {
            assert!(config.penalty_weight(i + 1) >= config.penalty_weight(i));
        }
    }

    fn bare_iterate(mean: Vec<DVector<f64>>, zeta: Vec<f64>) -> SteeringIterate {
        let n = mean.len() - 1;
        SteeringIterate {
            feedforward: vec![DVector::zeros(1); n],
            cov: Vec::new(),
            cross: Vec::new(),
            control_cov: Vec::new(),
            tau: vec![0.0; n],
            zeta,
            tau_hat: vec![0.0; n],
            mean,
        }
    }

    #[test]
    fn convergence_test_checks_both_conditions() {
        let config = SolverConfig::default();
        let mean = vec![DVector::from_vec(vec![1.0, 2.0]); 3];
        let same = check_convergence(
            &bare_iterate(mean.clone(), vec![0.0, 0.0]),
            &bare_iterate(mean.clone(), vec![0.0, 0.0]),
            &config,
        )
        .unwrap();
        assert!(same.converged);
        assert_eq!(same.mean_shift, 0.0);

        // A 1e-3 relative shift fails the 5e-4 tolerance.
        let shifted: Vec<_> = mean.iter().map(|m| m * 1.001).collect();
        let moved = check_convergence(
            &bare_iterate(mean.clone(), vec![0.0, 0.0]),
            &bare_iterate(shifted, vec![0.0, 0.0]),
            &config,
        )
        .unwrap();
        assert!((moved.mean_shift - 1e-3).abs() < 1e-9);
        assert!(!moved.converged);

        // Identical means but a slack above tolerance.
        let slacked = check_convergence(
            &bare_iterate(mean.clone(), vec![0.0, 0.0]),
            &bare_iterate(mean.clone(), vec![1e-5, 0.0]),
            &config,
        )
        .unwrap();
        assert!(!slacked.converged);
        assert_eq!(slacked.zeta_max, 1e-5);

        let zeros = vec![DVector::zeros(2); 3];
        assert!(check_convergence(
            &bare_iterate(zeros.clone(), vec![0.0, 0.0]),
            &bare_iterate(zeros, vec![0.0, 0.0]),
            &config,
        )
        .is_err());
    }

    fn gain_iterate(p: DMatrix<f64>, u: DMatrix<f64>) -> SteeringIterate {
        let n_x = p.nrows();
        let n_u = u.nrows();
        SteeringIterate {
            mean: vec![DVector::zeros(n_x); 2],
            feedforward: vec![DVector::zeros(n_u)],
            cov: vec![p.clone(), p],
            cross: vec![u],
            control_cov: vec![DMatrix::zeros(n_u, n_u)],
            tau: vec![0.0],
            zeta: vec![0.0],
            tau_hat: vec![0.0],
        }
    }

    #[test]
    fn gain_recovery_inverts_the_covariance() {
        // U = 0 → K = 0; P = I → K = U.
        let zero = recover_gains(&gain_iterate(DMatrix::identity(3, 3), DMatrix::zeros(2, 3)))
            .unwrap();
        assert_eq!(zero[0].norm(), 0.0);
        let u = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, -1.0]);
        let same = recover_gains(&gain_iterate(DMatrix::identity(3, 3), u.clone())).unwrap();
        assert!((&same[0] - &u).norm() < 1e-14);

        // Random SPD P: K P recovers U to 1e-10.
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..20 {
            let m = DMatrix::from_fn(4, 4, |_, _, | rng.random_range(-1.0..1.0));
            let p = &m * m.transpose() + DMatrix::identity(4, 4) * 0.1;
            let u = DMatrix::from_fn(2, 4, |_, _, | rng.random_range(-1.0..1.0));
            let k = recover_gains(&gain_iterate(p.clone(), u.clone())).unwrap();
            assert!((&k[0] * &p - &u).norm() < 1e-10, "residual too large");
        }
    }

    #[test]
    fn gain_recovery_rejects_singular_covariance_by_node() {
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        let err = recover_gains(&gain_iterate(p, DMatrix::zeros(1, 2))).unwrap_err();
        match err {
            Error::SingularCovariance { node, .. } => assert_eq!(node, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn pinv_recovery_handles_singular_directions_exactly() {
        // P singular with U vanishing on null(P): recovery still exact.
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0, 1.0]));
        let u = DMatrix::from_row_slice(1, 3, &[4.0, 0.0, -3.0]);
        let it = gain_iterate(p.clone(), u.clone());
        let k = recover_gains_pinv(&it);
        assert!((&k[0] * &p - &u).norm() < 1e-12);
        assert_eq!(k[0][(0, 1)], 0.0);
    }

    #[test]
    fn layout_and_census_agree_with_closed_form_counts() {
        // The planar flight problem: n_x = 5, n_u = 2, N = 40.
        let layout = SubproblemLayout::new(5, 2, 40);
        assert_eq!(layout.n_vars, 1580);
        let config = SolverConfig::default();
        let report = census(5, 2, 40, &config);
        assert_eq!(report.total_variables(), layout.n_vars);
        // P variables: (N+1)·sv_x = 41·15.
        let p_vars = report
            .variables
            .iter()
            .find(|(name, _)| name.starts_with("state covariances"))
            .unwrap()
            .1;
        assert_eq!(p_vars, 615);
        assert_eq!(report.total_equalities(), 5 + 200 + 4 + 15 + 600);
        assert_eq!(
            report.total_cone_rows(),
            40 * 3 + 40 + 40 + 40 + 40 * 28 + 40 * 3 + 120 + 15
        );

        let equality = census(
            5,
            2,
            40,
            &SolverConfig {
                terminal_covariance: TerminalCovarianceMode::Equality,
                ..config
            },
        );
        assert_eq!(equality.total_equalities(), 824 + 15);
        assert_eq!(equality.total_cone_rows(), 1615 - 15);
    }

    /// Exact discrete double-integrator segments with process noise.
    fn di_segments(n: usize, h: f64, sigma2: f64) -> Vec<DiscreteSegment> {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.5 * h * h, h]);
        let q = DMatrix::from_row_slice(
            2,
            2,
            &[
                sigma2 * h * h * h / 3.0,
                sigma2 * h * h / 2.0,
                sigma2 * h * h / 2.0,
                sigma2 * h,
            ],
        );
        let g = sqrt_factor(&q).unwrap();
        (0..n)
            .map(|k| DiscreteSegment {
                a: a.clone(),
                b: b.clone(),
                c: DVector::zeros(2),
                q: q.clone(),
                g: g.clone(),
                t0: k as f64 * h,
                t1: (k + 1) as f64 * h,
            })
            .collect()
    }

    /// Run the penalty loop on a fixed linear discretization (no
    /// re-linearization needed) until the slack vanishes.
    fn steer_linear(
        segments: &[DiscreteSegment],
        x_i: &DVector<f64>,
        x_f: &DVector<f64>,
        p_i: &DMatrix<f64>,
        p_f: &DMatrix<f64>,
        u_max: f64,
        config: &SolverConfig,
    ) -> SteeringSolution {
        let n = segments.len();
        let chi_u = chi2_quantile_sqrt(1, config.beta_u).unwrap();
        let mut tau_hat = vec![config.d * 0.05 * u_max / chi_u; n];
        let problem = SteeringProblem {
            segments,
            x_i,
            x_f_posvel: x_f,
            p_i,
            p_f,
            u_max,
        };
        let settings = SolverSettings::default();
        let mut history = Vec::new();
        let mut result: Option<SteeringIterate> = None;
        for i in 1..=config.max_iterations {
            let weight = config.penalty_weight(i);
            let (prog, layout) = build_subproblem(&problem, &tau_hat, weight, config).unwrap();
            let sol = conic::solve(&prog, &settings).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal, "iteration {i}");
            let mut iterate = extract_iterate(&layout, &sol.x, &tau_hat);
            iterate.cov[0] = p_i * (config.d * config.d);
            let zeta_max = iterate.zeta.iter().cloned().fold(0.0_f64, f64::max);
            let shift = result
                .as_ref()
                .map(|prev: &SteeringIterate| {
                    check_convergence(prev, &iterate, config).unwrap().mean_shift
                })
                .unwrap_or(f64::INFINITY);
            let (j3, j_pen) = objective_terms(&iterate, weight, config);
            history.push(IterationRecord {
                iteration: i,
                weight,
                j3,
                j_pen,
                j_aug: j3 + j_pen,
                zeta_max,
                mean_shift: shift,
                status: sol.status,
                solver_iterations: sol.iterations as usize,
                solve_time: sol.solve_time,
            });
            for (th, t) in tau_hat.iter_mut().zip(&iterate.tau) {
                *th = t.max(TAU_HAT_FLOOR);
            }
            let done = zeta_max <= config.eps_zeta && shift <= config.eps_x;
            result = Some(iterate);
            if done {
                let iterate = result.unwrap();
                let gains = recover_gains_pinv(&iterate);
                let last = history.last().unwrap();
                return SteeringSolution {
                    times: (0..=n).map(|k| k as f64).collect(),
                    gains,
                    segments: segments.to_vec(),
                    converged: true,
                    iterations: last.iteration,
                    j3: last.j3,
                    j_pen: last.j_pen,
                    config: config.clone(),
                    u_max,
                    mass_stochastic: false,
                    dim: 1,
                    history,
                    iterate,
                };
            }
        }
        panic!("penalty loop did not converge on the linear test problem");
    }

    #[test]
    fn double_integrator_steering_meets_the_terminal_bound() {
        let segments = di_segments(10, 0.5, 1e-3);
        let x_i = DVector::from_vec(vec![1.0, 0.0]);
        let x_f = DVector::zeros(2);
        let p_i = DMatrix::identity(2, 2);
        let p_f = DMatrix::identity(2, 2) * 0.25;
        let config = SolverConfig {
            d: 1.0,
            eps_y: 1e-4,
            max_iterations: 20,
            ..SolverConfig::default()
        };
        let sol = steer_linear(&segments, &x_i, &x_f, &p_i, &p_f, 50.0, &config);

        // Terminal covariance inside the quarter-identity bound.
        let p_n = sol.covariance(10);
        assert!(p_n.trace() <= 0.5 + 1e-6, "trace {}", p_n.trace());
        let slack_eig = (&p_f - &p_n).symmetric_eigen().eigenvalues.min();
        assert!(slack_eig >= -1e-7, "terminal bound violated by {slack_eig:.3e}");

        // Boundary means hit exactly.
        assert!((&sol.iterate.mean[0] - &x_i).norm() < 1e-7);
        assert!(sol.iterate.mean[10].norm() < 1e-7);

        // Certification invariants at the converged iterate.
        let cert = sol.certify().unwrap();
        assert!(cert.schur_min_eig >= -1e-7, "schur {}", cert.schur_min_eig);
        assert!(
            cert.recursion_residual <= 1e-7,
            "recursion {}",
            cert.recursion_residual
        );
        assert!(
            cert.control_slack_min >= -1e-6,
            "control {}",
            cert.control_slack_min
        );
        assert!(
            cert.feedback_bound_slack_min >= -1e-7,
            "feedback bound {}",
            cert.feedback_bound_slack_min
        );
        assert!(cert.zeta_max <= 1e-6);
        assert!(cert.gain_residual <= 1e-6, "gains {}", cert.gain_residual);

        // Closed-loop propagation with the recovered gains stays inside the
        // solved covariances (the recursion is an upper bound).
        let propagated = propagate_covariance(&sol.segments, &sol.covariance(0), &sol.gains)
            .unwrap();
        for (k, p) in propagated.iter().enumerate() {
            let gap = (p - sol.covariance(k)).symmetric_eigen().eigenvalues.max();
            assert!(gap <= 1e-5, "node {k} propagated exceeds solved by {gap:.3e}");
        }

        // The history reports a monotone penalty schedule and finite costs.
        for pair in sol.history.windows(2) {
            assert!(pair[1].weight >= pair[0].weight);
        }
        assert!(sol.history.iter().all(|r| r.j_aug.is_finite()));
    }

    #[test]
    fn zero_noise_zero_uncertainty_needs_no_feedback() {
        // Q = 0 and P_i = 0 with a slack terminal bound: the optimizer keeps
        // the covariance machinery at zero and reduces to mean-only fuel
        // minimization.
        let mut segments = di_segments(8, 0.5, 0.0);
        for seg in &mut segments {
            seg.q.fill(0.0);
            seg.g.fill(0.0);
        }
        let x_i = DVector::from_vec(vec![1.0, 0.0]);
        let x_f = DVector::zeros(2);
        let p_i = DMatrix::zeros(2, 2);
        let p_f = DMatrix::identity(2, 2) * 1e3;
        let config = SolverConfig {
            d: 1.0,
            eps_y: 1e-4,
            max_iterations: 20,
            ..SolverConfig::default()
        };
        let sol = steer_linear(&segments, &x_i, &x_f, &p_i, &p_f, 50.0, &config);
        for k in 0..8 {
            assert!(sol.iterate.control_cov[k].norm() <= 1e-6);
            assert!(sol.iterate.cross[k].norm() <= 1e-6);
            assert!(sol.tau(k) <= 1e-5);
        }
        assert!(sol.covariance(8).trace() <= 1e-8);
        assert!(sol.j3 > 0.0, "moving the mean needs thrust");
    }

    #[test]
    fn build_rejects_bad_references() {
        let segments = di_segments(4, 0.5, 1e-3);
        let x_i = DVector::zeros(2);
        let x_f = DVector::zeros(2);
        let p = DMatrix::identity(2, 2);
        let config = SolverConfig {
            d: 1.0,
            ..SolverConfig::default()
        };
        let problem = SteeringProblem {
            segments: &segments,
            x_i: &x_i,
            x_f_posvel: &x_f,
            p_i: &p,
            p_f: &p,
            u_max: 1.0,
        };
        // Negative linearization reference.
        let err = build_subproblem(&problem, &[0.1, -0.1, 0.1, 0.1], 1e4, &config).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
        // Wrong tau count.
        assert!(build_subproblem(&problem, &[0.1; 3], 1e4, &config).is_err());
        // Wrong initial-mean size.
        let x_bad = DVector::zeros(3);
        let bad = SteeringProblem {
            x_i: &x_bad,
            ..problem
        };
        assert!(build_subproblem(&bad, &[0.1; 4], 1e4, &config).is_err());
    }

    #[test]
    fn built_program_matches_the_census() {
        let segments = di_segments(6, 0.5, 1e-3);
        let x_i = DVector::zeros(2);
        let x_f = DVector::zeros(2);
        let p = DMatrix::identity(2, 2);
        for mode in [
            TerminalCovarianceMode::UpperBound,
            TerminalCovarianceMode::Equality,
        ] {
            let config = SolverConfig {
                d: 1.0,
                terminal_covariance: mode,
                ..SolverConfig::default()
            };
            let problem = SteeringProblem {
                segments: &segments,
                x_i: &x_i,
                x_f_posvel: &x_f,
                p_i: &p,
                p_f: &p,
                u_max: 1.0,
            };
            let (prog, layout) = build_subproblem(&problem, &[0.1; 6], 1e4, &config).unwrap();
            let report = census(2, 1, 6, &config);
            assert_eq!(prog.n_vars(), report.total_variables());
            assert_eq!(prog.n_vars(), layout.n_vars);
            assert_eq!(prog.n_equalities(), report.total_equalities());
            assert_eq!(prog.n_cone_rows(), report.total_cone_rows());
            assert_eq!(prog.cones().len(), report.total_cones());
        }
    }

    #[test]
    fn iteration_record_logs_the_documented_columns() {
        let record = IterationRecord {
            iteration: 3,
            weight: 1e6,
            j3: 1.25,
            j_pen: 0.5,
            j_aug: 1.75,
            zeta_max: 2e-7,
            mean_shift: 3e-4,
            status: SolveStatus::Optimal,
            solver_iterations: 17,
            solve_time: 0.2,
        };
        let line = record.log_line();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(
            fields.len(),
            IterationRecord::LOG_HEADER.split('\t').count()
        );
        assert_eq!(fields[0], "3");
        assert_eq!(fields[6], "optimal");
    }
}
