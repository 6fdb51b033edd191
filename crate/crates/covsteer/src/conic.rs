//! Standard-form conic programs and a solver adapter.
//!
//! A [`ConicProgram`] is
//!
//!   minimize    costᵀ x
//!   subject to  E x = e
//!               M_i x + h_i ∈ K_i   for each cone block i,
//!
//! with K_i a nonnegative orthant, a second-order cone (first coordinate is
//! the bound: ‖z‖ ≤ t), or a PSD cone over the scaled triangular
//! vectorization of a symmetric block. Rows are built through the `add_*`
//! methods; [`solve`] hands the assembled problem to an interior-point
//! backend (Clarabel) and maps its status back into [`SolveStatus`].
//!
//! Symmetric matrices enter and leave the PSD cones through [`pack_sym`] /
//! [`unpack_sym`]: triangle entries in column order with off-diagonal values
//! multiplied by √2, which makes the packing an isometry
//! (⟨pack S, pack T⟩ = tr(S T)).

use crate::error::{Error, Result};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;
use std::fmt;
use std::io::Write;

/// Length of the packed triangle of an s×s symmetric matrix.
pub fn svec_len(s: usize) -> usize {
    s * (s + 1) / 2
}

/// Pack a symmetric matrix into its scaled triangular vectorization:
/// entries (i ≤ j) in column-major order, off-diagonals scaled by √2.
pub fn pack_sym(m: &DMatrix<f64>) -> Vec<f64> {
    let s = m.nrows();
    debug_assert_eq!(s, m.ncols());
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut v = Vec::with_capacity(svec_len(s));
    for j in 0..s {
        for i in 0..=j {
            if i == j {
                v.push(m[(i, j)]);
            } else {
                v.push(sqrt2 * m[(i, j)]);
            }
        }
    }
    v
}

/// Inverse of [`pack_sym`].
pub fn unpack_sym(v: &[f64], s: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), svec_len(s));
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut m = DMatrix::zeros(s, s);
    let mut idx = 0;
    for j in 0..s {
        for i in 0..=j {
            if i == j {
                m[(i, j)] = v[idx];
            } else {
                m[(i, j)] = v[idx] / sqrt2;
                m[(j, i)] = m[(i, j)];
            }
            idx += 1;
        }
    }
    m
}

/// Index of the packed entry for matrix position (i, j), i ≤ j.
pub fn svec_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

/// A linear expression terms·x + constant used to fill constraint rows.
#[derive(Clone, Debug, Default)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn constant(c: f64) -> Self {
        AffineExpr {
            terms: Vec::new(),
            constant: c,
        }
    }
    pub fn term(var: usize, coeff: f64) -> Self {
        AffineExpr {
            terms: vec![(var, coeff)],
            constant: 0.0,
        }
    }
    pub fn push(&mut self, var: usize, coeff: f64) -> &mut Self {
        if coeff != 0.0 {
            self.terms.push((var, coeff));
        }
        self
    }
}

/// Cone tags; `Psd(s)` covers an s×s symmetric block supplied in packed form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConeSpec {
    NonNeg(usize),
    Soc(usize),
    Psd(usize),
}

impl ConeSpec {
    /// Number of packed rows the cone occupies.
    pub fn rows(&self) -> usize {
        match *self {
            ConeSpec::NonNeg(n) => n,
            ConeSpec::Soc(n) => n,
            ConeSpec::Psd(s) => svec_len(s),
        }
    }
}

/// Solver outcome categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::MaxIterations => "max-iterations",
            SolveStatus::NumericalFailure => "numerical-failure",
        };
        write!(f, "{s}")
    }
}

/// Result of [`solve`]: status, primal point, objective, and diagnostics.
#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub solve_time: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Interior-point settings forwarded to the backend. The defaults keep the
/// subproblem two orders of magnitude tighter than the SCP convergence test.
#[derive(Clone, Debug)]
pub struct SolverSettings {
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol_feas: 1e-8,
            tol_gap_abs: 1e-8,
            tol_gap_rel: 1e-8,
            max_iter: 200,
            verbose: false,
        }
    }
}

/// The assembled program. Rows are stored as affine expressions; conversion
/// to the backend's compressed-sparse-column form happens once, in [`solve`].
#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    n_vars: usize,
    cost: Vec<f64>,
    eq_rows: Vec<AffineExpr>,
    cone_rows: Vec<AffineExpr>,
    cones: Vec<ConeSpec>,
}

impl ConicProgram {
    pub fn new(n_vars: usize) -> Self {
        ConicProgram {
            n_vars,
            cost: vec![0.0; n_vars],
            ..Default::default()
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }
    pub fn n_equalities(&self) -> usize {
        self.eq_rows.len()
    }
    pub fn n_cone_rows(&self) -> usize {
        self.cone_rows.len()
    }
    pub fn cones(&self) -> &[ConeSpec] {
        &self.cones
    }

    /// Add to the linear objective coefficient of a variable.
    pub fn add_cost(&mut self, var: usize, coeff: f64) -> Result<()> {
        self.check_var(var)?;
        self.cost[var] += coeff;
        Ok(())
    }

    fn check_var(&self, var: usize) -> Result<()> {
        if var >= self.n_vars {
            return Err(Error::MalformedProgram(format!(
                "variable index {var} out of range (n_vars = {})",
                self.n_vars
            )));
        }
        Ok(())
    }

    fn check_expr(&self, e: &AffineExpr) -> Result<()> {
        for &(var, coeff) in &e.terms {
            self.check_var(var)?;
            if !coeff.is_finite() {
                return Err(Error::MalformedProgram(format!(
                    "non-finite coefficient on variable {var}"
                )));
            }
        }
        if !e.constant.is_finite() {
            return Err(Error::MalformedProgram("non-finite constant".into()));
        }
        Ok(())
    }

    /// Append one equality row: expr(x) = rhs (constants fold into the rhs).
    /// Returns the row index.
    pub fn add_equality(&mut self, expr: AffineExpr, rhs: f64) -> Result<usize> {
        self.check_expr(&expr)?;
        let mut row = expr;
        row.constant -= rhs;
        self.eq_rows.push(row);
        Ok(self.eq_rows.len() - 1)
    }

    /// Append rows constrained to the nonnegative orthant: each expr(x) ≥ 0.
    /// Returns the cone-block index.
    pub fn add_nonneg(&mut self, exprs: Vec<AffineExpr>) -> Result<usize> {
        if exprs.is_empty() {
            return Err(Error::MalformedProgram("empty nonnegative block".into()));
        }
        for e in &exprs {
            self.check_expr(e)?;
        }
        let n = exprs.len();
        self.cone_rows.extend(exprs);
        self.cones.push(ConeSpec::NonNeg(n));
        Ok(self.cones.len() - 1)
    }

    /// Append a second-order cone ‖z‖ ≤ t; `exprs[0]` is t, the rest are z.
    /// Returns the cone-block index.
    pub fn add_soc(&mut self, exprs: Vec<AffineExpr>) -> Result<usize> {
        if exprs.is_empty() {
            return Err(Error::MalformedProgram("empty second-order cone".into()));
        }
        for e in &exprs {
            self.check_expr(e)?;
        }
        let n = exprs.len();
        self.cone_rows.extend(exprs);
        self.cones.push(ConeSpec::Soc(n));
        Ok(self.cones.len() - 1)
    }

    /// Append a PSD block of side `s`. `exprs` supplies the packed triangle
    /// (see [`pack_sym`]) of the affine symmetric matrix that must be PSD.
    /// Returns the cone-block index.
    pub fn add_psd(&mut self, s: usize, exprs: Vec<AffineExpr>) -> Result<usize> {
        if s == 0 {
            return Err(Error::MalformedProgram("PSD block of side 0".into()));
        }
        if exprs.len() != svec_len(s) {
            return Err(Error::MalformedProgram(format!(
                "PSD block of side {s} needs {} packed rows, got {}",
                svec_len(s),
                exprs.len()
            )));
        }
        for e in &exprs {
            self.check_expr(e)?;
        }
        self.cone_rows.extend(exprs);
        self.cones.push(ConeSpec::Psd(s));
        Ok(self.cones.len() - 1)
    }

    /// Dump in a plain triplet text format: a cone header section, then one
    /// line per nonzero (`constraint-id variable-id coefficient`), constants
    /// as variable-id −1. Intended for debugging subproblem assembly.
    pub fn dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# conic program: {} variables", self.n_vars)?;
        writeln!(w, "# equalities {}", self.eq_rows.len())?;
        for (i, spec) in self.cones.iter().enumerate() {
            writeln!(w, "# cone {i} {spec:?}")?;
        }
        writeln!(w, "# cost")?;
        for (j, c) in self.cost.iter().enumerate() {
            if *c != 0.0 {
                writeln!(w, "cost {j} {c:.17e}")?;
            }
        }
        for (i, row) in self.eq_rows.iter().chain(self.cone_rows.iter()).enumerate() {
            for &(j, v) in &row.terms {
                writeln!(w, "{i} {j} {v:.17e}")?;
            }
            if row.constant != 0.0 {
                writeln!(w, "{i} -1 {:.17e}", row.constant)?;
            }
        }
        Ok(())
    }

    /// Evaluate one stored row at a primal point (terms·x + constant).
    fn eval_row(row: &AffineExpr, x: &[f64]) -> f64 {
        row.terms
            .iter()
            .map(|&(j, v)| v * x[j])
            .sum::<f64>()
            + row.constant
    }

    /// Maximum |expr(x) − 0| over equality rows at a primal point.
    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        self.eq_rows
            .iter()
            .map(|r| Self::eval_row(r, x).abs())
            .fold(0.0, f64::max)
    }

    /// Worst cone violation at a primal point: negative orthant entries,
    /// ‖z‖ − t for second-order cones, −λ_min for PSD blocks.
    pub fn cone_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        let mut offset = 0;
        for spec in &self.cones {
            let rows = &self.cone_rows[offset..offset + spec.rows()];
            match spec {
                ConeSpec::NonNeg(_) => {
                    for r in rows {
                        worst = worst.max(-Self::eval_row(r, x));
                    }
                }
                ConeSpec::Soc(_) => {
                    let t = Self::eval_row(&rows[0], x);
                    let z: f64 = rows[1..]
                        .iter()
                        .map(|r| Self::eval_row(r, x).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    worst = worst.max(z - t);
                }
                ConeSpec::Psd(s) => {
                    let vals: Vec<f64> = rows.iter().map(|r| Self::eval_row(r, x)).collect();
                    let m = unpack_sym(&vals, *s);
                    let min_eig = m.symmetric_eigen().eigenvalues.min();
                    worst = worst.max(-min_eig);
                }
            }
            offset += spec.rows();
        }
        worst
    }
}

/// Assemble `A x + s = b, s ∈ K` for the backend and solve. Equality rows map
/// to the zero cone, a cone membership `e(x) ∈ K` to `−M x + s = h`.
pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution> {
    let n = program.n_vars;
    let m_total = program.eq_rows.len() + program.cone_rows.len();

    // Triplets with final row order: equalities first, then cone rows.
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b = Vec::with_capacity(m_total);
    for (i, row) in program.eq_rows.iter().enumerate() {
        for &(j, v) in &row.terms {
            triplets.push((i, j, v));
        }
        b.push(-row.constant); // expr = 0  ⇒  terms·x = −constant
    }
    let base = program.eq_rows.len();
    for (i, row) in program.cone_rows.iter().enumerate() {
        for &(j, v) in &row.terms {
            triplets.push((base + i, j, -v)); // −M x + s = h
        }
        b.push(row.constant);
    }

    // Duplicate (row, col) entries are summed while building CSC.
    triplets.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval: Vec<usize> = Vec::with_capacity(triplets.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
    {
        let mut idx = 0;
        for col in 0..n {
            colptr[col] = rowval.len();
            while idx < triplets.len() && triplets[idx].1 == col {
                let (r, _, mut v) = triplets[idx];
                idx += 1;
                while idx < triplets.len() && triplets[idx].1 == col && triplets[idx].0 == r {
                    v += triplets[idx].2;
                    idx += 1;
                }
                rowval.push(r);
                nzval.push(v);
            }
        }
        colptr[n] = rowval.len();
    }
    let a = CscMatrix::new(m_total, n, colptr, rowval, nzval);
    let p: CscMatrix<f64> = CscMatrix::zeros((n, n));

    let mut cones: Vec<SupportedConeT<f64>> = Vec::with_capacity(program.cones.len() + 1);
    if !program.eq_rows.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(program.eq_rows.len()));
    }
    for spec in &program.cones {
        cones.push(match *spec {
            ConeSpec::NonNeg(k) => SupportedConeT::NonnegativeConeT(k),
            ConeSpec::Soc(k) => SupportedConeT::SecondOrderConeT(k),
            ConeSpec::Psd(s) => SupportedConeT::PSDTriangleConeT(s),
        });
    }

    let backend_settings = DefaultSettingsBuilder::default()
        .verbose(settings.verbose)
        .max_iter(settings.max_iter)
        .tol_feas(settings.tol_feas)
        .tol_gap_abs(settings.tol_gap_abs)
        .tol_gap_rel(settings.tol_gap_rel)
        .build()
        .map_err(|e| Error::MalformedProgram(format!("solver settings rejected: {e}")))?;

    let mut solver = DefaultSolver::new(&p, &program.cost, &a, &b, &cones, backend_settings)
        .map_err(|e| Error::MalformedProgram(format!("solver rejected problem: {e:?}")))?;
    solver.solve();

    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        // "Almost" accuracy (~1e-7 residuals) still satisfies every tolerance
        // checked downstream; log it rather than failing the run.
        SolverStatus::AlmostSolved => {
            log::debug!("conic backend returned reduced-accuracy optimum");
            SolveStatus::Optimal
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            SolveStatus::Unbounded
        }
        SolverStatus::MaxIterations => SolveStatus::MaxIterations,
        _ => SolveStatus::NumericalFailure,
    };

    Ok(ConicSolution {
        status,
        x: sol.x.clone(),
        objective: sol.obj_val,
        iterations: sol.iterations,
        solve_time: sol.solve_time,
        primal_residual: sol.r_prim,
        dual_residual: sol.r_dual,
    })
}
