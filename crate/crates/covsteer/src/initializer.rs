//! Deterministic minimum-fuel initializer: produces the nominal reference
//! trajectory the covariance-steering loop starts from, either by running a
//! penalized successive-convexification solve of the fuel-optimal transfer or
//! by loading a previously written reference file.
//!
//! Reference file layout (plain text, `#` starts a comment):
//!
//! ```text
//! n_x 5
//! n_u 2
//! segments 40
//! units canonical
//! columns time state*n_x control*n_u
//! <N+1 data rows: node time, the n_x state entries, the n_u control entries>
//! ```
//!
//! All values are canonical (nondimensional) units. Controls are zero-order
//! held over the segment that starts at the row's node; the final row's
//! control columns are padding zeros.

use nalgebra::DVector;

use crate::artifacts::atomic_write;
use crate::conic::{self, AffineExpr, ConicProgram, SolveStatus, SolverSettings};
use crate::discretize::{discretize_all, repropagate_reference, ReferenceTrajectory};
use crate::dynamics::{propagate_zoh, FullModel, Model};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

/// Knobs of the deterministic solve. The defaults converge the bundled
/// scenarios; they are deliberately conservative because this runs once per
/// workflow.
#[derive(Clone, Debug)]
pub struct InitializerOptions {
    pub max_iterations: usize,
    /// 1-norm weight on the dynamics-defect (virtual control) variables.
    pub defect_weight: f64,
    /// Initial quadratic trust-region weight on state and control steps.
    /// Each iteration halves it while the step stays inside the
    /// linearization's validity (measured by the nonlinear path defect) and
    /// raises it tenfold when the step outruns it.
    pub trust_weight: f64,
    /// Relative stacked-state shift below which the loop may stop.  The
    /// interior-point solutions carry noise around 1e-6 relative, so pushing
    /// this much lower just spins; the terminal re-propagation check is what
    /// actually guards accuracy.
    pub shift_tolerance: f64,
    /// Largest admissible defect row at a converged iterate.
    pub defect_tolerance: f64,
    /// Terminal position/velocity miss allowed after nonlinear re-propagation.
    pub terminal_tolerance: f64,
    /// RK4 substeps per segment for discretization and re-propagation.
    pub substeps: usize,
    /// Lower bound kept on the mass state (canonical units) so intermediate
    /// iterates stay inside the dynamics' domain.
    pub mass_floor: f64,
}

impl Default for InitializerOptions {
    fn default() -> Self {
        InitializerOptions {
            max_iterations: 60,
            defect_weight: 1e4,
            trust_weight: 1.0,
            shift_tolerance: 1e-5,
            defect_tolerance: 1e-9,
            terminal_tolerance: 5e-7,
            substeps: 32,
            mass_floor: 1e-2,
        }
    }
}

impl InitializerOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.substeps == 0 {
            return Err(Error::InvalidParameter(
                "initializer iteration and substep counts must be ≥ 1".into(),
            ));
        }
        for (name, v) in [
            ("defect_weight", self.defect_weight),
            ("trust_weight", self.trust_weight),
            ("shift_tolerance", self.shift_tolerance),
            ("defect_tolerance", self.defect_tolerance),
            ("terminal_tolerance", self.terminal_tolerance),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Σ ‖u_k‖·Δt_k — the impulse the reference spends.
pub fn total_impulse(reference: &ReferenceTrajectory) -> f64 {
    reference
        .controls
        .iter()
        .enumerate()
        .map(|(k, u)| u.norm() * (reference.times[k + 1] - reference.times[k]))
        .sum()
}

struct MinFuelLayout {
    n_x: usize,
    n_u: usize,
    off_state: usize,
    off_control: usize,
    off_fuel: usize,
    off_defect_pos: usize,
    off_defect_neg: usize,
    off_state_trust: usize,
    off_control_trust: usize,
    n_vars: usize,
}

impl MinFuelLayout {
    fn new(n_x: usize, n_u: usize, n: usize) -> Self {
        let off_state = 0;
        let off_control = off_state + (n + 1) * n_x;
        let off_fuel = off_control + n * n_u;
        let off_defect_pos = off_fuel + n;
        let off_defect_neg = off_defect_pos + n * n_x;
        let off_state_trust = off_defect_neg + n * n_x;
        let off_control_trust = off_state_trust + (n + 1);
        let n_vars = off_control_trust + n;
        MinFuelLayout {
            n_x,
            n_u,
            off_state,
            off_control,
            off_fuel,
            off_defect_pos,
            off_defect_neg,
            off_state_trust,
            off_control_trust,
            n_vars,
        }
    }
    fn state(&self, k: usize, i: usize) -> usize {
        self.off_state + k * self.n_x + i
    }
    fn control(&self, k: usize, j: usize) -> usize {
        self.off_control + k * self.n_u + j
    }
    fn fuel(&self, k: usize) -> usize {
        self.off_fuel + k
    }
    fn defect_pos(&self, k: usize, i: usize) -> usize {
        self.off_defect_pos + k * self.n_x + i
    }
    fn defect_neg(&self, k: usize, i: usize) -> usize {
        self.off_defect_neg + k * self.n_x + i
    }
    fn state_trust(&self, k: usize) -> usize {
        self.off_state_trust + k
    }
    fn control_trust(&self, k: usize) -> usize {
        self.off_control_trust + k
    }
}

/// Append `s ≥ ‖expr‖²` where `expr` is a list of affine rows, via the
/// second-order-cone form ‖(expr, (s−1)/2)‖ ≤ (s+1)/2.
fn add_quad_epigraph(
    prog: &mut ConicProgram,
    s_var: usize,
    mut middle: Vec<AffineExpr>,
) -> Result<()> {
    let mut top = AffineExpr::term(s_var, 0.5);
    top.constant = 0.5;
    let mut bottom = AffineExpr::term(s_var, 0.5);
    bottom.constant = -0.5;
    let mut rows = Vec::with_capacity(middle.len() + 2);
    rows.push(top);
    rows.append(&mut middle);
    rows.push(bottom);
    prog.add_soc(rows)?;
    Ok(())
}

/// Minimum-fuel transfer for an arbitrary model by penalized successive
/// convexification: linearize about the incumbent, solve the convex
/// subproblem with slack "virtual control" on the dynamics and a quadratic
/// trust region, repeat until the defects vanish and the iterate stops
/// moving, then re-propagate nonlinearly so the returned nodes satisfy the
/// dynamics exactly.
///
/// `x_f` pins the leading rows of the terminal state (position/velocity for
/// the flight models; a trailing mass stays free). Inputs are canonical.
pub fn solve_min_fuel(
    model: &dyn Model,
    x_i: &DVector<f64>,
    x_f: &DVector<f64>,
    u_max: f64,
    cold_start: &ReferenceTrajectory,
    options: &InitializerOptions,
) -> Result<ReferenceTrajectory> {
    options.validate()?;
    let n_x = model.n_x();
    let n_u = model.n_u();
    let n = cold_start.n_segments();
    if x_i.len() != n_x || x_f.len() > n_x || cold_start.states[0].len() != n_x {
        return Err(Error::DimensionMismatch(format!(
            "boundary/state sizes inconsistent: x_i {}, x_f {}, model n_x {n_x}",
            x_i.len(),
            x_f.len()
        )));
    }
    if !(u_max > 0.0) {
        return Err(Error::InvalidParameter("u_max must be positive".into()));
    }
    let times = cold_start.times.clone();
    let layout = MinFuelLayout::new(n_x, n_u, n);
    let settings = SolverSettings::default();
    let mut reference = cold_start.clone();
    let mut segments = discretize_all(model, &reference, options.substeps)?;
    let mut last_shift = f64::INFINITY;
    let mut last_defect = f64::INFINITY;
    let mut last_impulse = f64::INFINITY;
    let mut last_path_error = f64::INFINITY;
    let mut trust_weight = options.trust_weight;

    for iteration in 1..=options.max_iterations {
        let mut prog = ConicProgram::new(layout.n_vars);
        for k in 0..n {
            let dt = times[k + 1] - times[k];
            prog.add_cost(layout.fuel(k), dt)?;
            prog.add_cost(layout.control_trust(k), trust_weight)?;
            for i in 0..n_x {
                prog.add_cost(layout.defect_pos(k, i), options.defect_weight)?;
                prog.add_cost(layout.defect_neg(k, i), options.defect_weight)?;
            }
        }
        for k in 0..=n {
            prog.add_cost(layout.state_trust(k), trust_weight)?;
        }

        for i in 0..n_x {
            prog.add_equality(AffineExpr::term(layout.state(0, i), 1.0), x_i[i])?;
        }
        for (k, seg) in segments.iter().enumerate() {
            for i in 0..n_x {
                let mut e = AffineExpr::term(layout.state(k + 1, i), 1.0);
                for j in 0..n_x {
                    e.push(layout.state(k, j), -seg.a[(i, j)]);
                }
                for j in 0..n_u {
                    e.push(layout.control(k, j), -seg.b[(i, j)]);
                }
                e.push(layout.defect_pos(k, i), -1.0);
                e.push(layout.defect_neg(k, i), 1.0);
                prog.add_equality(e, seg.c[i])?;
            }
        }
        for i in 0..x_f.len() {
            prog.add_equality(AffineExpr::term(layout.state(n, i), 1.0), x_f[i])?;
        }

        let mut nonneg = Vec::with_capacity(2 * n * n_x);
        for k in 0..n {
            for i in 0..n_x {
                nonneg.push(AffineExpr::term(layout.defect_pos(k, i), 1.0));
                nonneg.push(AffineExpr::term(layout.defect_neg(k, i), 1.0));
            }
        }
        prog.add_nonneg(nonneg)?;
        if model.has_mass_state() {
            let rows = (0..=n)
                .map(|k| {
                    let mut e = AffineExpr::term(layout.state(k, n_x - 1), 1.0);
                    e.constant = -options.mass_floor;
                    e
                })
                .collect();
            prog.add_nonneg(rows)?;
        }
        for k in 0..n {
            let mut epi = Vec::with_capacity(1 + n_u);
            epi.push(AffineExpr::term(layout.fuel(k), 1.0));
            for j in 0..n_u {
                epi.push(AffineExpr::term(layout.control(k, j), 1.0));
            }
            prog.add_soc(epi)?;
            let mut bound = Vec::with_capacity(1 + n_u);
            bound.push(AffineExpr::constant(u_max));
            for j in 0..n_u {
                bound.push(AffineExpr::term(layout.control(k, j), 1.0));
            }
            prog.add_soc(bound)?;
        }
        for k in 0..=n {
            let middle = (0..n_x)
                .map(|i| {
                    let mut e = AffineExpr::term(layout.state(k, i), 1.0);
                    e.constant = -reference.states[k][i];
                    e
                })
                .collect();
            add_quad_epigraph(&mut prog, layout.state_trust(k), middle)?;
        }
        for k in 0..n {
            let middle = (0..n_u)
                .map(|j| {
                    let mut e = AffineExpr::term(layout.control(k, j), 1.0);
                    e.constant = -reference.controls[k][j];
                    e
                })
                .collect();
            add_quad_epigraph(&mut prog, layout.control_trust(k), middle)?;
        }

        let sol = conic::solve(&prog, &settings)?;
        if sol.status != SolveStatus::Optimal {
            return Err(Error::SubproblemFailed {
                iteration,
                status: sol.status.to_string(),
            });
        }

        let states: Vec<DVector<f64>> = (0..=n)
            .map(|k| DVector::from_fn(n_x, |i, _| sol.x[layout.state(k, i)]))
            .collect();
        let controls: Vec<DVector<f64>> = (0..n)
            .map(|k| DVector::from_fn(n_u, |j, _| sol.x[layout.control(k, j)]))
            .collect();
        let mut defect = 0.0_f64;
        for k in 0..n {
            for i in 0..n_x {
                defect = defect
                    .max(sol.x[layout.defect_pos(k, i)].max(0.0))
                    .max(sol.x[layout.defect_neg(k, i)].max(0.0));
            }
        }
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for (new, old) in states.iter().zip(&reference.states) {
            diff2 += (new - old).norm_squared();
            norm2 += old.norm_squared();
        }
        let shift = (diff2 / norm2.max(f64::MIN_POSITIVE)).sqrt();
        let impulse: f64 = controls
            .iter()
            .enumerate()
            .map(|(k, u)| u.norm() * (times[k + 1] - times[k]))
            .sum();
        last_shift = shift;
        last_defect = defect;
        let candidate = ReferenceTrajectory {
            times: times.clone(),
            states,
            controls,
        };

        // Linearize about the candidate.  Failure means the step left the
        // model's physical domain (mass exhausted, singular radius): reject
        // it, tighten the proximal weight, and re-solve about the incumbent.
        let new_segments = match discretize_all(model, &candidate, options.substeps) {
            Ok(segs) => segs,
            Err(err) => {
                trust_weight = (trust_weight * 10.0).min(1e8);
                log::debug!(
                    "min-fuel iteration {iteration}: step rejected ({err}); \
                     proximal weight {trust_weight:.1e}"
                );
                continue;
            }
        };

        // Path error of the candidate under the nonlinear dynamics: each
        // fresh segment's affine term carries the nonlinear flow from its
        // start node, so A x_k + B u_k + c is the true segment endpoint.
        // A shrinking (or already negligible) error means the linearization
        // is keeping up and the proximal weight can relax so the fuel term
        // dominates; a clearly growing error means the step outran its
        // validity and the weight tightens.  Absolute magnitude alone must
        // not tighten the weight: early iterates from a crude cold start
        // are always far from feasibility.
        let mut nl_defect = 0.0_f64;
        for (k, seg) in new_segments.iter().enumerate() {
            let end = &seg.a * &candidate.states[k] + &seg.b * &candidate.controls[k] + &seg.c;
            nl_defect = nl_defect.max((&candidate.states[k + 1] - end).norm());
        }
        if nl_defect <= 1e-6 || nl_defect < last_path_error {
            trust_weight = (trust_weight * 0.5).max(1e-6);
        } else if nl_defect > 1e-4 && nl_defect > 1.5 * last_path_error {
            trust_weight = (trust_weight * 10.0).min(1e8);
        }
        last_path_error = nl_defect;
        let impulse_stalled = (impulse - last_impulse).abs() <= 1e-6 * impulse.abs().max(1e-6);
        last_impulse = impulse;
        log::debug!(
            "min-fuel iteration {iteration}: defect {defect:.3e}, shift {shift:.3e}, \
             path error {nl_defect:.3e}, impulse {impulse:.9e}, proximal weight {trust_weight:.1e}"
        );
        reference = candidate;
        segments = new_segments;

        if defect <= options.defect_tolerance
            && (shift <= options.shift_tolerance || impulse_stalled)
        {
            let cascaded = repropagate_reference(model, &reference, options.substeps)?;
            let miss = (cascaded.states[n].rows(0, x_f.len()) - x_f).norm();
            if miss <= options.terminal_tolerance {
                cascaded.validate()?;
                return Ok(cascaded);
            }
            // Keep refining about the dynamics-consistent trajectory.
            log::debug!("cascade terminal miss {miss:.3e}; continuing");
            segments = discretize_all(model, &cascaded, options.substeps)?;
            reference = cascaded;
        }
    }
    Err(Error::NotConverged {
        max_iterations: options.max_iterations,
        mean_shift: last_shift,
        zeta_max: last_defect,
    })
}

/// The ballistic cold start: propagate the departure state with zero thrust
/// across the grid.  Unlike a straight position chord — which for orbital
/// transfers cuts through the deep gravity well, where no bounded thrust can
/// hold the linearized path — the coast arc is dynamics-consistent and stays
/// in a region where the linearization is trustworthy, so only the pinned
/// terminal rows start out violated.
fn cold_start(
    model: &dyn Model,
    x_i: &DVector<f64>,
    times: &[f64],
    substeps: usize,
) -> Result<ReferenceTrajectory> {
    let n = times.len() - 1;
    let u0 = DVector::zeros(model.n_u());
    let mut states = Vec::with_capacity(n + 1);
    states.push(x_i.clone());
    for k in 0..n {
        let next = propagate_zoh(model, &states[k], &u0, times[k], times[k + 1], substeps)?;
        states.push(next);
    }
    Ok(ReferenceTrajectory {
        times: times.to_vec(),
        states,
        controls: vec![u0; n],
    })
}

/// Solve the deterministic minimum-fuel transfer for a scenario on its grid.
/// The result is in canonical units, satisfies the nonlinear dynamics under
/// zero-order-hold controls segment-by-segment, respects the thrust bound,
/// and hits the terminal position/velocity mean.
pub fn solve_reference(
    scenario: &Scenario,
    options: &InitializerOptions,
) -> Result<ReferenceTrajectory> {
    scenario.validate()?;
    options.validate()?;
    let scales = scenario.scales()?;
    let params = scenario.params.nondimensionalize(&scales);
    let dim = scenario.dim;
    let model = FullModel::new(params, dim)?;
    let n = scenario.n_segments;
    let t_f = scales.scale_time(scenario.t_f);
    let times: Vec<f64> = (0..=n).map(|k| t_f * k as f64 / n as f64).collect();
    let x_i = scales.scale_state(&scenario.x_i(), dim);
    let x_f = scales.scale_state(&scenario.x_f_posvel(), dim);
    let cold = cold_start(&model, &x_i, &times, options.substeps)?;
    let reference = solve_min_fuel(&model, &x_i, &x_f, model.params.u_max, &cold, options)?;
    let bound = model.params.u_max + 1e-6;
    if let Some(bad) = reference.controls.iter().position(|u| u.norm() > bound) {
        return Err(Error::InvalidParameter(format!(
            "segment {bad} control exceeds the thrust bound after convergence"
        )));
    }
    Ok(reference)
}

/// Write a reference to disk in the documented text layout (atomically).
pub fn write_reference(path: &std::path::Path, reference: &ReferenceTrajectory) -> Result<()> {
    reference.validate()?;
    let mut out = String::new();
    let n_x = reference.states[0].len();
    let n_u = reference.controls[0].len();
    out.push_str("# minimum-fuel reference trajectory\n");
    out.push_str(&format!("n_x {n_x}\n"));
    out.push_str(&format!("n_u {n_u}\n"));
    out.push_str(&format!("segments {}\n", reference.n_segments()));
    out.push_str("units canonical\n");
    out.push_str("columns time state*n_x control*n_u\n");
    for k in 0..reference.times.len() {
        let mut row = format!("{}", reference.times[k]);
        for v in reference.states[k].iter() {
            row.push(' ');
            row.push_str(&format!("{v}"));
        }
        if k < reference.n_segments() {
            for v in reference.controls[k].iter() {
                row.push(' ');
                row.push_str(&format!("{v}"));
            }
        } else {
            for _ in 0..n_u {
                row.push_str(" 0");
            }
        }
        out.push_str(&row);
        out.push('\n');
    }
    atomic_write(path, &out)
}

/// Load a reference written by [`write_reference`], with line-level
/// diagnostics and full invariant validation.
pub fn load_reference(path: &std::path::Path) -> Result<ReferenceTrajectory> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_reference(&text, &path.display().to_string())
}

fn parse_reference(text: &str, origin: &str) -> Result<ReferenceTrajectory> {
    let mut n_x: Option<usize> = None;
    let mut n_u: Option<usize> = None;
    let mut segments: Option<usize> = None;
    let mut units_ok = false;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let bad = |line: usize, msg: String| Error::InvalidReference(format!("{origin}:{line}: {msg}"));

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let first = toks.next().unwrap();
        match first {
            "n_x" | "n_u" | "segments" => {
                let v: usize = toks
                    .next()
                    .ok_or_else(|| bad(line_no, format!("{first} needs a value")))?
                    .parse()
                    .map_err(|_| bad(line_no, format!("{first} must be an integer")))?;
                match first {
                    "n_x" => n_x = Some(v),
                    "n_u" => n_u = Some(v),
                    _ => segments = Some(v),
                }
            }
            "units" => {
                let tag = toks.next().unwrap_or("");
                if tag != "canonical" {
                    return Err(bad(
                        line_no,
                        format!("unsupported units tag {tag:?}; expected \"canonical\""),
                    ));
                }
                units_ok = true;
            }
            "columns" => {}
            _ => {
                let mut vals = Vec::new();
                for tok in std::iter::once(first).chain(toks) {
                    vals.push(
                        tok.parse::<f64>()
                            .map_err(|_| bad(line_no, format!("not a number: {tok:?}")))?,
                    );
                }
                rows.push((line_no, vals));
            }
        }
    }

    let n_x = n_x.ok_or_else(|| bad(0, "missing n_x header".into()))?;
    let n_u = n_u.ok_or_else(|| bad(0, "missing n_u header".into()))?;
    let n = segments.ok_or_else(|| bad(0, "missing segments header".into()))?;
    if !units_ok {
        return Err(bad(0, "missing units header".into()));
    }
    if rows.len() != n + 1 {
        return Err(Error::InvalidReference(format!(
            "{origin}: expected {} data rows, found {}",
            n + 1,
            rows.len()
        )));
    }
    let want = 1 + n_x + n_u;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    for (row_idx, (line_no, vals)) in rows.iter().enumerate() {
        if vals.len() != want {
            return Err(bad(
                *line_no,
                format!("expected {want} columns, found {}", vals.len()),
            ));
        }
        times.push(vals[0]);
        states.push(DVector::from_column_slice(&vals[1..1 + n_x]));
        if row_idx < n {
            controls.push(DVector::from_column_slice(&vals[1 + n_x..]));
        }
        if row_idx > 0 && !(vals[0] > times[row_idx - 1]) {
            return Err(bad(
                *line_no,
                format!(
                    "time {} does not increase past {}",
                    vals[0],
                    times[row_idx - 1]
                ),
            ));
        }
    }
    let reference = ReferenceTrajectory {
        times,
        states,
        controls,
    };
    reference.validate()?;
    Ok(reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::propagate_zoh;
    use nalgebra::DMatrix;

    /// A frictionless cart: the simplest model the generic solve supports.
    struct DoubleIntegrator;

    impl Model for DoubleIntegrator {
        fn n_x(&self) -> usize {
            2
        }
        fn n_u(&self) -> usize {
            1
        }
        fn n_w(&self) -> usize {
            1
        }
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(DVector::from_vec(vec![x[1], u[0]]))
        }
        fn jacobians(
            &self,
            _t: f64,
            _x: &DVector<f64>,
            _u: &DVector<f64>,
        ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
            Ok((
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
                DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
                DVector::zeros(2),
            ))
        }
        fn diffusion(&self, _t: f64, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
            Ok(DMatrix::zeros(2, 1))
        }
        fn mass_of(&self, _t: f64, _x: &DVector<f64>) -> f64 {
            1.0
        }
    }

    /// Direct transcription of the same discrete minimum-fuel problem as a
    /// linear program (positive/negative thrust split), solved independently
    /// of the successive-convexification path.
    fn lp_min_fuel_impulse(n: usize, h: f64, u_max: f64, target: f64) -> f64 {
        let nx = 2;
        // Variables: states (n+1)·2, u⁺ n, u⁻ n.
        let off_up = (n + 1) * nx;
        let off_un = off_up + n;
        let mut prog = ConicProgram::new(off_un + n);
        for k in 0..n {
            prog.add_cost(off_up + k, h).unwrap();
            prog.add_cost(off_un + k, h).unwrap();
        }
        let a = [[1.0, h], [0.0, 1.0]];
        let b = [0.5 * h * h, h];
        for i in 0..nx {
            prog.add_equality(AffineExpr::term(i, 1.0), 0.0).unwrap();
            prog.add_equality(AffineExpr::term(n * nx + i, 1.0), if i == 0 { target } else { 0.0 })
                .unwrap();
        }
        for k in 0..n {
            for i in 0..nx {
                let mut e = AffineExpr::term((k + 1) * nx + i, 1.0);
                for j in 0..nx {
                    e.push(k * nx + j, -a[i][j]);
                }
                e.push(off_up + k, -b[i]);
                e.push(off_un + k, b[i]);
                prog.add_equality(e, 0.0).unwrap();
            }
        }
        let mut rows = Vec::new();
        for k in 0..n {
            rows.push(AffineExpr::term(off_up + k, 1.0));
            rows.push(AffineExpr::term(off_un + k, 1.0));
            let mut cap = AffineExpr::constant(u_max);
            cap.push(off_up + k, -1.0);
            cap.push(off_un + k, -1.0);
            rows.push(cap);
        }
        prog.add_nonneg(rows).unwrap();
        let sol = conic::solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        (0..n)
            .map(|k| (sol.x[off_up + k] + sol.x[off_un + k]) * h)
            .sum()
    }

    #[test]
    fn rest_to_rest_cart_is_bang_off_bang_and_matches_the_lp() {
        let _ = env_logger::builder().is_test(true).try_init();
        let model = DoubleIntegrator;
        let n = 120;
        let t_total = 4.0;
        let u_max = 10.0;
        let h = t_total / n as f64;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
        let x_i = DVector::zeros(2);
        let x_f = DVector::from_vec(vec![1.0, 0.0]);
        let cold = cold_start(&model, &x_i, &times, 2).unwrap();
        let options = InitializerOptions::default();
        let reference = solve_min_fuel(&model, &x_i, &x_f, u_max, &cold, &options).unwrap();

        // Impulse agrees with the independent transcription.
        let impulse = total_impulse(&reference);
        let oracle = lp_min_fuel_impulse(n, h, u_max, 1.0);
        assert!(
            (impulse - oracle).abs() <= 1e-3 * oracle,
            "impulse {impulse} vs oracle {oracle}"
        );

        // Bang-off-bang: at most two segments sit strictly between the rails.
        let partial = reference
            .controls
            .iter()
            .filter(|u| {
                let m = u.norm();
                m > 1e-4 * u_max && m < 0.999 * u_max
            })
            .count();
        assert!(partial <= 2, "{partial} partially-saturated segments");

        // Self-consistency: re-integrating each segment hits the next node.
        for k in 0..n {
            let next = propagate_zoh(
                &model,
                &reference.states[k],
                &reference.controls[k],
                times[k],
                times[k + 1],
                32,
            )
            .unwrap();
            assert!((next - &reference.states[k + 1]).norm() < 1e-9);
        }
        // Terminal state reached.
        assert!((reference.states[n].rows(0, 2) - &x_f).norm() < 1e-6);
    }

    #[test]
    fn ballistic_boundary_pair_needs_no_thrust() {
        let _ = env_logger::builder().is_test(true).try_init();
        // Propagate the planar scenario's departure state with zero thrust
        // and make that the arrival condition: coasting is then optimal.
        let mut scenario = Scenario::preset("earth-mars-2d").unwrap();
        let scales = scenario.scales().unwrap();
        let params = scenario.params.nondimensionalize(&scales);
        let model = FullModel::new(params, 2).unwrap();
        let x_i = scales.scale_state(&scenario.x_i(), 2);
        let t_f = scales.scale_time(scenario.t_f);
        let u0 = DVector::zeros(2);
        let coasted = propagate_zoh(&model, &x_i, &u0, 0.0, t_f, 4000).unwrap();
        let r_f: Vec<f64> = (0..2).map(|i| scales.unscale_length(coasted[i])).collect();
        let v_f: Vec<f64> = (0..2)
            .map(|i| scales.unscale_speed(coasted[2 + i]))
            .collect();
        scenario.r_f = DVector::from_vec(r_f);
        scenario.v_f = DVector::from_vec(v_f);
        scenario.n_segments = 20;

        let reference = solve_reference(&scenario, &InitializerOptions::default()).unwrap();
        let peak = reference
            .controls
            .iter()
            .map(|u| u.norm())
            .fold(0.0_f64, f64::max);
        assert!(peak <= 1e-6, "coast solution thrusts at {peak:.3e}");
        let m0 = reference.states[0][4];
        let mf = reference.states[20][4];
        assert!((m0 - mf).abs() <= 1e-9, "mass drifted from {m0} to {mf}");
    }

    #[test]
    fn reference_file_round_trips_exactly() {
        let reference = ReferenceTrajectory {
            times: vec![0.0, 0.7, 1.9],
            states: vec![
                DVector::from_vec(vec![1.0, 2.0, 0.25, -0.5, 1.0]),
                DVector::from_vec(vec![1.1, 2.1, 0.125, -0.25, 0.9111111111111111]),
                DVector::from_vec(vec![1.3, 2.3, 0.0625, -0.125, 0.825]),
            ],
            controls: vec![
                DVector::from_vec(vec![0.017, -0.003]),
                DVector::from_vec(vec![0.0, 0.0021]),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reference.txt");
        write_reference(&path, &reference).unwrap();
        let loaded = load_reference(&path).unwrap();
        assert_eq!(loaded.times, reference.times);
        for k in 0..3 {
            assert_eq!(loaded.states[k], reference.states[k]);
        }
        for k in 0..2 {
            assert_eq!(loaded.controls[k], reference.controls[k]);
        }
    }

    #[test]
    fn loader_reports_bad_rows_by_line() {
        let text = "n_x 2\nn_u 1\nsegments 2\nunits canonical\n\
                    0 1 0 0.5\n-1 1.1 0.1 0.2\n2 1.2 0.2 0\n";
        let err = parse_reference(text, "test-input").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test-input:6"), "{msg}");
        assert!(msg.contains("does not increase"), "{msg}");

        let short = "n_x 2\nn_u 1\nsegments 1\nunits canonical\n0 1 0\n1 1 0 0\n";
        let err = parse_reference(short, "short").unwrap_err();
        assert!(err.to_string().contains("columns"), "{err}");

        let wrong_units = "n_x 2\nn_u 1\nsegments 1\nunits km\n0 1 0 0\n1 1 0 0\n";
        assert!(parse_reference(wrong_units, "u").is_err());
    }
}
