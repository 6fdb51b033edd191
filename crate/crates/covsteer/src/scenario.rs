//! Scenario definition and its human-editable text format.
//!
//! A scenario fixes the problem: boundary distributions, physical constants,
//! horizon, grid and solver configuration. The on-disk format is line based —
//! `key value… [unit]` — with an explicit unit tag on every dimensional field
//! so that the two natural unit conventions (N vs kg·km/s², m/s² vs km/s²,
//! day vs s) can never be silently confused; the parser converts everything
//! to the internal km–kg–s system at ingest. Dispersions are written as
//! standard deviations (the natural table form) and squared into diagonal
//! covariances on demand.

use crate::dynamics::PhysicalParams;
use crate::error::{Error, Result};
use crate::scale::{ScaleSet, NEWTON_TO_KG_KM_S2};
use crate::steering::{SolverConfig, TerminalCovarianceMode};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const SECONDS_PER_DAY: f64 = 86400.0;

/// Names of the bundled scenarios.
pub const PRESET_NAMES: [&str; 3] = ["earth-mars-2d", "earth-mars-3d", "earth-mars-3d-mf40"];

const PRESET_2D: &str = include_str!("../presets/earth-mars-2d.scn");
const PRESET_3D: &str = include_str!("../presets/earth-mars-3d.scn");
const PRESET_3D_MF40: &str = include_str!("../presets/earth-mars-3d-mf40.scn");

/// Full problem definition in dimensional km–kg–s units.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    /// Position/velocity dimension: 2 (planar) or 3.
    pub dim: usize,
    /// Physical constants; thrust and gamma in kg·km/s² and kg·km/s^{3/2}.
    pub params: PhysicalParams,
    /// Initial mass (kg); also the mass scale.
    pub m_i: f64,
    pub r_i: DVector<f64>,
    pub v_i: DVector<f64>,
    pub r_f: DVector<f64>,
    pub v_f: DVector<f64>,
    /// Per-axis standard deviations of the boundary distributions.
    pub sigma_r_i: DVector<f64>,
    pub sigma_v_i: DVector<f64>,
    pub sigma_m_i: f64,
    pub sigma_r_f: DVector<f64>,
    pub sigma_v_f: DVector<f64>,
    pub sigma_m_f: f64,
    /// Time of flight (s).
    pub t_f: f64,
    /// Number of uniform segments.
    pub n_segments: usize,
    pub config: SolverConfig,
    /// When false, the optimizer models the mass as a known time profile
    /// instead of a stochastic state (the comparison mode).
    pub mass_stochastic: bool,
}

impl Scenario {
    pub fn n_x(&self) -> usize {
        2 * self.dim + 1
    }
    pub fn n_u(&self) -> usize {
        self.dim
    }

    /// The canonical nondimensionalization for this scenario: length 1 AU,
    /// time such that μ scales to 1, mass = initial mass.
    pub fn scales(&self) -> Result<ScaleSet> {
        ScaleSet::canonical(self.params.mu, self.m_i)
    }

    /// Initial mean state [r_i; v_i; m_i] (full, with mass).
    pub fn x_i(&self) -> DVector<f64> {
        let d = self.dim;
        let mut x = DVector::zeros(2 * d + 1);
        x.rows_mut(0, d).copy_from(&self.r_i);
        x.rows_mut(d, d).copy_from(&self.v_i);
        x[2 * d] = self.m_i;
        x
    }

    /// Final mean position/velocity [r_f; v_f]; the mean final mass is an
    /// outcome of the optimization, not a boundary condition.
    pub fn x_f_posvel(&self) -> DVector<f64> {
        let d = self.dim;
        let mut x = DVector::zeros(2 * d);
        x.rows_mut(0, d).copy_from(&self.r_f);
        x.rows_mut(d, d).copy_from(&self.v_f);
        x
    }

    /// Initial covariance diag(σ_r², σ_v², σ_m²) in km², (km/s)², kg².
    pub fn p_i(&self) -> DMatrix<f64> {
        self.boundary_cov(&self.sigma_r_i, &self.sigma_v_i, self.sigma_m_i)
    }

    /// Final covariance bound diag(σ_r², σ_v², σ_m²).
    pub fn p_f(&self) -> DMatrix<f64> {
        self.boundary_cov(&self.sigma_r_f, &self.sigma_v_f, self.sigma_m_f)
    }

    fn boundary_cov(&self, sr: &DVector<f64>, sv: &DVector<f64>, sm: f64) -> DMatrix<f64> {
        let d = self.dim;
        let mut p = DMatrix::zeros(2 * d + 1, 2 * d + 1);
        for i in 0..d {
            p[(i, i)] = sr[i] * sr[i];
            p[(d + i, d + i)] = sv[i] * sv[i];
        }
        p[(2 * d, 2 * d)] = sm * sm;
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::scenario(
                "dimension",
                format!("must be 2 or 3, got {}", self.dim),
            ));
        }
        self.params
            .validate()
            .map_err(|e| Error::scenario("params", e.to_string()))?;
        for (name, v, want) in [
            ("r_i", &self.r_i, self.dim),
            ("v_i", &self.v_i, self.dim),
            ("r_f", &self.r_f, self.dim),
            ("v_f", &self.v_f, self.dim),
            ("sigma_r_i", &self.sigma_r_i, self.dim),
            ("sigma_v_i", &self.sigma_v_i, self.dim),
            ("sigma_r_f", &self.sigma_r_f, self.dim),
            ("sigma_v_f", &self.sigma_v_f, self.dim),
        ] {
            if v.len() != want {
                return Err(Error::scenario(
                    name,
                    format!("expected {want} components, got {}", v.len()),
                ));
            }
        }
        for (name, v) in [
            ("sigma_r_i", &self.sigma_r_i),
            ("sigma_v_i", &self.sigma_v_i),
            ("sigma_r_f", &self.sigma_r_f),
            ("sigma_v_f", &self.sigma_v_f),
        ] {
            if v.iter().any(|s| *s < 0.0) {
                return Err(Error::scenario(name, "standard deviations must be ≥ 0"));
            }
        }
        if self.sigma_m_i < 0.0 || self.sigma_m_f < 0.0 {
            return Err(Error::scenario("sigma_m", "standard deviations must be ≥ 0"));
        }
        if !(self.m_i > 0.0) {
            return Err(Error::scenario("m_i", "initial mass must be positive"));
        }
        if !(self.t_f > 0.0) {
            return Err(Error::scenario("t_f", "time of flight must be positive"));
        }
        if self.n_segments < 2 {
            return Err(Error::scenario("segments", "need at least 2 segments"));
        }
        self.config.validate()?;
        Ok(())
    }

    /// Load one of the bundled scenarios by name.
    pub fn preset(name: &str) -> Result<Scenario> {
        let text = match name {
            "earth-mars-2d" => PRESET_2D,
            "earth-mars-3d" => PRESET_3D,
            "earth-mars-3d-mf40" => PRESET_3D_MF40,
            _ => {
                return Err(Error::scenario(
                    "preset",
                    format!("unknown preset {name:?}; available: {PRESET_NAMES:?}"),
                ))
            }
        };
        parse_scenario_str(text, &format!("preset:{name}"))
    }
}

/// Parse a scenario file. Errors carry the line number and field name.
pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_scenario_str(&text, &path.display().to_string())
}

/// A raw parsed line: numeric values plus an optional trailing unit token.
struct RawField {
    line_no: usize,
    values: Vec<f64>,
    unit: Option<String>,
}

pub fn parse_scenario_str(text: &str, origin: &str) -> Result<Scenario> {
    let mut fields: BTreeMap<String, RawField> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let key = tokens.next().unwrap().to_string();
        let rest: Vec<&str> = tokens.collect();
        if rest.is_empty() {
            return Err(Error::scenario(
                format!("{origin}:{line_no}:{key}"),
                "missing value",
            ));
        }
        let mut values = Vec::new();
        let mut unit = None;
        for (i, tok) in rest.iter().enumerate() {
            match tok.parse::<f64>() {
                Ok(v) => {
                    values.push(v);
                }
                Err(_) => {
                    if i == rest.len() - 1 {
                        unit = Some(tok.to_string());
                    } else {
                        return Err(Error::scenario(
                            format!("{origin}:{line_no}:{key}"),
                            format!("unparseable value {tok:?}"),
                        ));
                    }
                }
            }
        }
        if fields.insert(key.clone(), RawField { line_no, values, unit }).is_some() {
            return Err(Error::scenario(
                format!("{origin}:{line_no}:{key}"),
                "duplicate field",
            ));
        }
    }

    let loc = |f: &RawField, key: &str| format!("{origin}:{}:{key}", f.line_no);

    let mut take = |key: &str| -> Result<RawField> {
        fields.remove(key).ok_or_else(|| {
            Error::scenario(format!("{origin}:{key}"), "required field missing")
        })
    };

    // Scalar with an expected unit; `conversions` maps accepted unit tags to
    // multiplicative factors into the internal convention.
    fn scalar(f: &RawField, loc: String, conversions: &[(&str, f64)]) -> Result<f64> {
        if f.values.len() != 1 {
            return Err(Error::scenario(loc, format!("expected 1 value, got {}", f.values.len())));
        }
        unit_factor(f, loc.clone(), conversions).map(|factor| f.values[0] * factor)
    }

    fn vector(f: &RawField, loc: String, dim: usize, conversions: &[(&str, f64)]) -> Result<DVector<f64>> {
        if f.values.len() != dim {
            return Err(Error::scenario(
                loc,
                format!("expected {dim} components, got {}", f.values.len()),
            ));
        }
        let factor = unit_factor(f, loc, conversions)?;
        Ok(DVector::from_iterator(dim, f.values.iter().map(|v| v * factor)))
    }

    fn unit_factor(f: &RawField, loc: String, conversions: &[(&str, f64)]) -> Result<f64> {
        if conversions.is_empty() {
            return match &f.unit {
                None => Ok(1.0),
                Some(u) => Err(Error::scenario(loc, format!("dimensionless field has unit {u:?}"))),
            };
        }
        let unit = f.unit.as_deref().ok_or_else(|| {
            Error::scenario(
                loc.clone(),
                format!(
                    "missing unit tag; expected one of {:?}",
                    conversions.iter().map(|c| c.0).collect::<Vec<_>>()
                ),
            )
        })?;
        conversions
            .iter()
            .find(|(tag, _)| *tag == unit)
            .map(|(_, factor)| *factor)
            .ok_or_else(|| {
                Error::scenario(
                    loc,
                    format!(
                        "unit {unit:?} not accepted; expected one of {:?}",
                        conversions.iter().map(|c| c.0).collect::<Vec<_>>()
                    ),
                )
            })
    }

    let f = take("dimension")?;
    let dim = scalar(&f, loc(&f, "dimension"), &[])? as usize;
    if dim != 2 && dim != 3 {
        return Err(Error::scenario(loc(&f, "dimension"), "must be 2 or 3"));
    }

    let km = [("km", 1.0)];
    let kms = [("km/s", 1.0)];
    let kg = [("kg", 1.0)];

    let f = take("mu")?;
    let mu = scalar(&f, loc(&f, "mu"), &[("km^3/s^2", 1.0)])?;
    let f = take("isp")?;
    let isp = scalar(&f, loc(&f, "isp"), &[("s", 1.0)])?;
    let f = take("g0")?;
    let g0 = scalar(&f, loc(&f, "g0"), &[("km/s^2", 1.0), ("m/s^2", 1e-3)])?;
    let f = take("u_max")?;
    let u_max = scalar(
        &f,
        loc(&f, "u_max"),
        &[("N", NEWTON_TO_KG_KM_S2), ("kg*km/s^2", 1.0)],
    )?;
    let f = take("gamma")?;
    let gamma = scalar(&f, loc(&f, "gamma"), &[("kg*km/s^1.5", 1.0)])?;
    let f = take("t_f")?;
    let t_f = scalar(&f, loc(&f, "t_f"), &[("day", SECONDS_PER_DAY), ("s", 1.0)])?;
    let f = take("segments")?;
    let n_segments = scalar(&f, loc(&f, "segments"), &[])? as usize;
    let f = take("m_i")?;
    let m_i = scalar(&f, loc(&f, "m_i"), &kg)?;

    let f = take("r_i")?;
    let r_i = vector(&f, loc(&f, "r_i"), dim, &km)?;
    let f = take("v_i")?;
    let v_i = vector(&f, loc(&f, "v_i"), dim, &kms)?;
    let f = take("r_f")?;
    let r_f = vector(&f, loc(&f, "r_f"), dim, &km)?;
    let f = take("v_f")?;
    let v_f = vector(&f, loc(&f, "v_f"), dim, &kms)?;
    let f = take("sigma_r_i")?;
    let sigma_r_i = vector(&f, loc(&f, "sigma_r_i"), dim, &km)?;
    let f = take("sigma_v_i")?;
    let sigma_v_i = vector(&f, loc(&f, "sigma_v_i"), dim, &kms)?;
    let f = take("sigma_m_i")?;
    let sigma_m_i = scalar(&f, loc(&f, "sigma_m_i"), &kg)?;
    let f = take("sigma_r_f")?;
    let sigma_r_f = vector(&f, loc(&f, "sigma_r_f"), dim, &km)?;
    let f = take("sigma_v_f")?;
    let sigma_v_f = vector(&f, loc(&f, "sigma_v_f"), dim, &kms)?;
    let f = take("sigma_m_f")?;
    let sigma_m_f = scalar(&f, loc(&f, "sigma_m_f"), &kg)?;

    // Solver configuration: optional, with the standard defaults.
    let mut config = SolverConfig::default();
    if let Some(f) = fields.remove("d") {
        config.d = scalar(&f, loc(&f, "d"), &[])?;
    }
    if let Some(f) = fields.remove("eps_Y") {
        config.eps_y = scalar(&f, loc(&f, "eps_Y"), &[])?;
    }
    if let Some(f) = fields.remove("p") {
        config.p = scalar(&f, loc(&f, "p"), &[])?;
    }
    if let Some(f) = fields.remove("beta_u") {
        config.beta_u = scalar(&f, loc(&f, "beta_u"), &[])?;
    }
    if let Some(f) = fields.remove("eps_x") {
        config.eps_x = scalar(&f, loc(&f, "eps_x"), &[])?;
    }
    if let Some(f) = fields.remove("eps_zeta") {
        config.eps_zeta = scalar(&f, loc(&f, "eps_zeta"), &[])?;
    }
    if let Some(f) = fields.remove("max_iterations") {
        config.max_iterations = scalar(&f, loc(&f, "max_iterations"), &[])? as usize;
    }

    let mut mass_stochastic = true;
    if let Some(f) = fields.remove("mass_stochastic") {
        let l = loc(&f, "mass_stochastic");
        mass_stochastic = match f.unit.as_deref() {
            Some("on") => true,
            Some("off") => false,
            other => {
                return Err(Error::scenario(
                    l,
                    format!("expected on|off, got {other:?}"),
                ))
            }
        };
    }
    if let Some(f) = fields.remove("terminal_cov") {
        let l = loc(&f, "terminal_cov");
        config.terminal_covariance = match f.unit.as_deref() {
            Some("upper-bound") => TerminalCovarianceMode::UpperBound,
            Some("equality") => TerminalCovarianceMode::Equality,
            Some("posvel-equality") => TerminalCovarianceMode::PosVelEquality,
            other => {
                return Err(Error::scenario(
                    l,
                    format!("expected upper-bound|equality|posvel-equality, got {other:?}"),
                ))
            }
        };
    }

    if let Some((key, f)) = fields.iter().next() {
        return Err(Error::scenario(
            format!("{origin}:{}:{key}", f.line_no),
            "unknown field",
        ));
    }

    let scenario = Scenario {
        dim,
        params: PhysicalParams {
            mu,
            isp,
            g0,
            u_max,
            gamma,
            n_w: dim,
        },
        m_i,
        r_i,
        v_i,
        r_f,
        v_f,
        sigma_r_i,
        sigma_v_i,
        sigma_m_i,
        sigma_r_f,
        sigma_v_f,
        sigma_m_f,
        t_f,
        n_segments,
        config,
        mass_stochastic,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Serialize in the canonical on-disk form. Numbers print with Rust's
/// shortest round-trip representation, so `parse(write(s)) == s` holds
/// field-for-field.
pub fn write_scenario(scenario: &Scenario) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "# trajectory steering scenario");
    let _ = writeln!(w, "dimension {}", scenario.dim);
    let _ = writeln!(w, "mu {} km^3/s^2", scenario.params.mu);
    let _ = writeln!(w, "isp {} s", scenario.params.isp);
    let _ = writeln!(w, "g0 {} km/s^2", scenario.params.g0);
    let _ = writeln!(w, "u_max {} kg*km/s^2", scenario.params.u_max);
    let _ = writeln!(w, "gamma {} kg*km/s^1.5", scenario.params.gamma);
    let _ = writeln!(w, "t_f {} s", scenario.t_f);
    let _ = writeln!(w, "segments {}", scenario.n_segments);
    let _ = writeln!(w, "m_i {} kg", scenario.m_i);
    let vec_line = |name: &str, v: &DVector<f64>, unit: &str| {
        let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        format!("{name} {} {unit}", vals.join(" "))
    };
    let _ = writeln!(w, "{}", vec_line("r_i", &scenario.r_i, "km"));
    let _ = writeln!(w, "{}", vec_line("v_i", &scenario.v_i, "km/s"));
    let _ = writeln!(w, "{}", vec_line("r_f", &scenario.r_f, "km"));
    let _ = writeln!(w, "{}", vec_line("v_f", &scenario.v_f, "km/s"));
    let _ = writeln!(w, "{}", vec_line("sigma_r_i", &scenario.sigma_r_i, "km"));
    let _ = writeln!(w, "{}", vec_line("sigma_v_i", &scenario.sigma_v_i, "km/s"));
    let _ = writeln!(w, "sigma_m_i {} kg", scenario.sigma_m_i);
    let _ = writeln!(w, "{}", vec_line("sigma_r_f", &scenario.sigma_r_f, "km"));
    let _ = writeln!(w, "{}", vec_line("sigma_v_f", &scenario.sigma_v_f, "km/s"));
    let _ = writeln!(w, "sigma_m_f {} kg", scenario.sigma_m_f);
    let c = &scenario.config;
    let _ = writeln!(w, "d {}", c.d);
    let _ = writeln!(w, "eps_Y {}", c.eps_y);
    let _ = writeln!(w, "p {}", c.p);
    let _ = writeln!(w, "beta_u {}", c.beta_u);
    let _ = writeln!(w, "eps_x {}", c.eps_x);
    let _ = writeln!(w, "eps_zeta {}", c.eps_zeta);
    let _ = writeln!(w, "max_iterations {}", c.max_iterations);
    let _ = writeln!(
        w,
        "mass_stochastic {}",
        if scenario.mass_stochastic { "on" } else { "off" }
    );
    let _ = writeln!(
        w,
        "terminal_cov {}",
        match c.terminal_covariance {
            TerminalCovarianceMode::UpperBound => "upper-bound",
            TerminalCovarianceMode::Equality => "equality",
            TerminalCovarianceMode::PosVelEquality => "posvel-equality",
        }
    );
    out
}
