//! Run outputs: delimiter-separated tables with units headers, confidence
//! ellipse polylines, a machine-readable run manifest, and a small static
//! SVG figure. Every file is written atomically (temp file + rename) and
//! every numeric value is printed with shortest-round-trip precision, so
//! re-reading a table reproduces the computed values exactly.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::montecarlo::{CoverageReport, Ensemble, PolicySchedule};
use crate::scale::ScaleSet;
use crate::scenario::Scenario;
use crate::stats::chi2_quantile;
use crate::steering::SteeringSolution;

/// Newtons per canonical-dimensional force unit (kg·km/s² = 10³ kg·m/s²).
const NEWTONS_PER_KM_FORCE: f64 = 1e3;

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write-temp-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    let stamp = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = parent.join(format!(".{name}.{}.{stamp}.tmp", std::process::id()));
    let write = std::fs::write(&tmp, contents)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| Error::io(path.display().to_string(), e));
    if write.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    write
}

/// A run's output directory plus the list of files written into it.
#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl RunArtifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(RunArtifacts {
            dir,
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        atomic_write(&path, contents)?;
        self.files.push(path.clone());
        Ok(path)
    }

    pub fn file_names(&self) -> Vec<String> {
        self.files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }
}

fn push_row(out: &mut String, head: impl std::fmt::Display, values: &[f64]) {
    use std::fmt::Write;
    let _ = write!(out, "{head}");
    for v in values {
        let _ = write!(out, "\t{v}");
    }
    out.push('\n');
}

fn state_column_names(dim: usize, n_x: usize) -> Vec<String> {
    let axes = ["x", "y", "z"];
    let mut names = Vec::with_capacity(n_x);
    for a in axes.iter().take(dim) {
        names.push(format!("r_{a}_km"));
    }
    for a in axes.iter().take(dim) {
        names.push(format!("v_{a}_km_s"));
    }
    if n_x == 2 * dim + 1 {
        names.push("mass_kg".into());
    }
    names
}

fn state_unit_labels(dim: usize, n_x: usize) -> String {
    let mut units = vec!["km"; dim];
    units.extend(vec!["km/s"; dim]);
    if n_x == 2 * dim + 1 {
        units.push("kg");
    }
    units.join(" ")
}

/// Node means in physical units, one row per node.
pub fn node_table(scenario: &Scenario, scales: &ScaleSet, policy: &PolicySchedule) -> String {
    let n_x = policy.n_x();
    let mut out = String::from("# node\tt_s");
    for name in state_column_names(scenario.dim, n_x) {
        out.push('\t');
        out.push_str(&name);
    }
    out.push('\n');
    for (k, mean) in policy.mean.iter().enumerate() {
        let x = scales.unscale_state(mean, scenario.dim);
        let mut row = vec![scales.unscale_time(policy.times[k])];
        row.extend(x.iter().copied());
        push_row(&mut out, k, &row);
    }
    out
}

/// Predicted node covariances, lower triangle in physical units.
pub fn covariance_table(scenario: &Scenario, scales: &ScaleSet, policy: &PolicySchedule) -> String {
    let n_x = policy.n_x();
    let mut out = format!(
        "# node\ti\tj\tp_ij\n# entry units: products of state units [{}]\n",
        state_unit_labels(scenario.dim, n_x)
    );
    for (k, cov) in policy.covariance.iter().enumerate() {
        let p = scales.unscale_state_cov(cov, scenario.dim);
        for i in 0..n_x {
            for j in 0..=i {
                push_row(&mut out, format!("{k}\t{i}\t{j}"), &[p[(i, j)]]);
            }
        }
    }
    out
}

/// Feedforward thrust schedule in newtons, with the per-segment feedback
/// magnitude bound τ alongside.
pub fn feedforward_table(
    scenario: &Scenario,
    scales: &ScaleSet,
    policy: &PolicySchedule,
    tau: &[f64],
) -> String {
    let axes = ["x", "y", "z"];
    let mut out = String::from("# segment\tt_start_s\tt_end_s");
    for a in axes.iter().take(scenario.dim) {
        out.push_str(&format!("\tu_{a}_N"));
    }
    out.push_str("\tthrust_N\ttau_N\n");
    for (k, f) in policy.feedforward.iter().enumerate() {
        let mut row = vec![
            scales.unscale_time(policy.times[k]),
            scales.unscale_time(policy.times[k + 1]),
        ];
        let newtons: Vec<f64> = f
            .iter()
            .map(|&v| scales.unscale_force(v) * NEWTONS_PER_KM_FORCE)
            .collect();
        row.extend(newtons.iter().copied());
        row.push(f.norm() * scales.unscale_force(1.0) * NEWTONS_PER_KM_FORCE);
        row.push(
            tau.get(k)
                .map(|&t| scales.unscale_force(t) * NEWTONS_PER_KM_FORCE)
                .unwrap_or(f64::NAN),
        );
        push_row(&mut out, k, &row);
    }
    out
}

/// Feedback gains mapping physical state deviations to thrust in newtons.
pub fn gain_table(scenario: &Scenario, scales: &ScaleSet, policy: &PolicySchedule) -> String {
    let n_x = policy.n_x();
    let state_units = scales.state_units(scenario.dim, n_x);
    let mut out = format!(
        "# segment\ti\tj\tk_ij\n# rows map state deviations [{}] to thrust newtons\n",
        state_unit_labels(scenario.dim, n_x)
    );
    let force = scales.unscale_force(1.0) * NEWTONS_PER_KM_FORCE;
    for (k, gain) in policy.gains.iter().enumerate() {
        for i in 0..gain.nrows() {
            for j in 0..n_x {
                let physical = gain[(i, j)] * force / state_units[j];
                push_row(&mut out, format!("{k}\t{i}\t{j}"), &[physical]);
            }
        }
    }
    out
}

/// The SCP iteration history in the documented tab-separated layout.
pub fn iteration_table(solution: &SteeringSolution) -> String {
    let mut out = format!("# {}\n", crate::steering::IterationRecord::LOG_HEADER);
    for record in &solution.history {
        out.push_str(&record.log_line());
        out.push('\n');
    }
    out
}

/// 64-point polyline of the confidence level set of each 2×2 covariance
/// block: points x̄ + scale·√q·L·(cos θ, sin θ) with L Lᵀ the block and q the
/// χ²₂ quantile at `confidence`.
pub fn ellipse_points(
    mean: (f64, f64),
    block: &DMatrix<f64>,
    confidence: f64,
    scale: f64,
    node: usize,
) -> Result<Vec<(f64, f64)>> {
    if block.shape() != (2, 2) {
        return Err(Error::DimensionMismatch(format!(
            "ellipse block must be 2×2, got {:?}",
            block.shape()
        )));
    }
    let chol = nalgebra::Cholesky::new(block.clone()).ok_or_else(|| {
        let min_eig = block
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        Error::SingularCovariance { node, min_eig }
    })?;
    let l = chol.l();
    let radius = chi2_quantile(2, confidence)?.sqrt() * scale;
    let n_points = 64;
    Ok((0..n_points)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / n_points as f64;
            let (s, c) = theta.sin_cos();
            (
                mean.0 + radius * (l[(0, 0)] * c),
                mean.1 + radius * (l[(1, 0)] * c + l[(1, 1)] * s),
            )
        })
        .collect())
}

/// Ellipse polylines for a series of nodes, as a table of
/// node / point-index / x / y rows.
pub fn emit_ellipses(
    means: &[(f64, f64)],
    blocks: &[DMatrix<f64>],
    confidence: f64,
    scale: f64,
) -> Result<String> {
    if means.len() != blocks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} means for {} covariance blocks",
            means.len(),
            blocks.len()
        )));
    }
    let mut out = format!(
        "# node\tpoint\tx_km\ty_km\n# level set at confidence {confidence}, \
         deviations from the mean multiplied by {scale}\n"
    );
    for (node, (mean, block)) in means.iter().zip(blocks).enumerate() {
        for (i, (x, y)) in ellipse_points(*mean, block, confidence, scale, node)?
            .into_iter()
            .enumerate()
        {
            push_row(&mut out, format!("{node}\t{i}"), &[x, y]);
        }
    }
    Ok(out)
}

/// Position-plane means and covariance blocks in km for ellipse drawing.
pub fn position_blocks(
    scenario: &Scenario,
    scales: &ScaleSet,
    policy: &PolicySchedule,
) -> (Vec<(f64, f64)>, Vec<DMatrix<f64>>) {
    let means = policy
        .mean
        .iter()
        .map(|m| {
            (
                scales.unscale_length(m[0]),
                scales.unscale_length(m[1]),
            )
        })
        .collect();
    let blocks = policy
        .covariance
        .iter()
        .map(|p| {
            scales
                .unscale_state_cov(p, scenario.dim)
                .view((0, 0), (2, 2))
                .into_owned()
        })
        .collect();
    (means, blocks)
}

/// Per-node ensemble summary: physical-unit mean, covariance lower triangle,
/// and the inside-fractions against the predicted confidence ellipsoids.
pub fn ensemble_table(
    scenario: &Scenario,
    scales: &ScaleSet,
    ensemble: &Ensemble,
    coverage: &CoverageReport,
) -> String {
    let n_x = ensemble.mean[0].len();
    let names = state_column_names(scenario.dim, n_x);
    let mut out = String::from("# node\tt_s");
    for name in &names {
        out.push('\t');
        out.push_str(&format!("mean_{name}"));
    }
    for i in 0..n_x {
        for j in 0..=i {
            out.push_str(&format!("\tp_{i}_{j}"));
        }
    }
    out.push_str("\tinside_pos\tinside_vel\n");
    out.push_str(&format!(
        "# covariance entry units: products of state units [{}]; \
         inside fractions at confidence {}\n",
        state_unit_labels(scenario.dim, n_x),
        coverage.confidence
    ));
    for k in 0..ensemble.times.len() {
        let mut row = vec![scales.unscale_time(ensemble.times[k])];
        let mean = scales.unscale_state(&ensemble.mean[k], scenario.dim);
        row.extend(mean.iter().copied());
        let p = scales.unscale_state_cov(&ensemble.covariance[k], scenario.dim);
        for i in 0..n_x {
            for j in 0..=i {
                row.push(p[(i, j)]);
            }
        }
        row.push(coverage.position[k]);
        row.push(coverage.velocity[k]);
        push_row(&mut out, k, &row);
    }
    out
}

/// Raw sample dump: one row per (sample, node) with the physical state and
/// the applied control in newtons (zeros on the final node's control slots).
pub fn samples_table(scenario: &Scenario, scales: &ScaleSet, ensemble: &Ensemble) -> String {
    let n_x = ensemble.mean[0].len();
    let axes = ["x", "y", "z"];
    let mut out = String::from("# sample\tnode\tt_s");
    for name in state_column_names(scenario.dim, n_x) {
        out.push('\t');
        out.push_str(&name);
    }
    for a in axes.iter().take(scenario.dim) {
        out.push_str(&format!("\tu_{a}_N"));
    }
    out.push('\n');
    let force = scales.unscale_force(1.0) * NEWTONS_PER_KM_FORCE;
    let n_nodes = ensemble.times.len();
    for (s, states) in ensemble.states.iter().enumerate() {
        for (k, state) in states.iter().enumerate() {
            let mut row = vec![scales.unscale_time(ensemble.times[k])];
            row.extend(scales.unscale_state(state, scenario.dim).iter().copied());
            if k + 1 < n_nodes {
                row.extend(ensemble.controls[s][k].iter().map(|&u| u * force));
            } else {
                row.extend(std::iter::repeat(0.0).take(scenario.dim));
            }
            push_row(&mut out, format!("{s}\t{k}"), &row);
        }
    }
    out
}

fn json_vector(v: &DVector<f64>) -> Value {
    Value::from(v.iter().copied().collect::<Vec<f64>>())
}

fn json_matrix(m: &DMatrix<f64>) -> Value {
    Value::from(
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
    )
}

fn vector_from_json(v: &Value, what: &str) -> Result<DVector<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::InvalidReference(format!("{what} is not an array")))?;
    let mut out = Vec::with_capacity(arr.len());
    for e in arr {
        out.push(
            e.as_f64()
                .ok_or_else(|| Error::InvalidReference(format!("{what} has a non-number")))?,
        );
    }
    Ok(DVector::from_vec(out))
}

fn matrix_from_json(v: &Value, what: &str) -> Result<DMatrix<f64>> {
    let rows = v
        .as_array()
        .ok_or_else(|| Error::InvalidReference(format!("{what} is not an array")))?;
    let mut data: Vec<DVector<f64>> = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        data.push(vector_from_json(row, &format!("{what}[{i}]"))?);
    }
    let nrows = data.len();
    let ncols = data.first().map_or(0, |r| r.len());
    if data.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidReference(format!("{what} rows are ragged")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| data[i][j]))
}

/// Serialize the policy (canonical units) for the manifest.
pub fn policy_to_json(policy: &PolicySchedule) -> Value {
    json!({
        "times": policy.times,
        "mean": policy.mean.iter().map(json_vector).collect::<Vec<_>>(),
        "feedforward": policy.feedforward.iter().map(json_vector).collect::<Vec<_>>(),
        "gains": policy.gains.iter().map(json_matrix).collect::<Vec<_>>(),
        "covariance": policy.covariance.iter().map(json_matrix).collect::<Vec<_>>(),
        "u_max": policy.u_max,
        "mass_stochastic": policy.mass_stochastic,
        "dim": policy.dim,
        "units": "canonical",
    })
}

/// Rebuild a policy from a manifest's `policy` object.
pub fn policy_from_json(value: &Value) -> Result<PolicySchedule> {
    let field = |name: &str| {
        value
            .get(name)
            .ok_or_else(|| Error::InvalidReference(format!("policy is missing {name:?}")))
    };
    let list = |name: &str| -> Result<&Vec<Value>> {
        field(name)?
            .as_array()
            .ok_or_else(|| Error::InvalidReference(format!("policy.{name} is not an array")))
    };
    let times = list("times")?
        .iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| Error::InvalidReference("policy.times has a non-number".into()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = list("mean")?
        .iter()
        .map(|v| vector_from_json(v, "policy.mean"))
        .collect::<Result<Vec<_>>>()?;
    let feedforward = list("feedforward")?
        .iter()
        .map(|v| vector_from_json(v, "policy.feedforward"))
        .collect::<Result<Vec<_>>>()?;
    let gains = list("gains")?
        .iter()
        .map(|v| matrix_from_json(v, "policy.gains"))
        .collect::<Result<Vec<_>>>()?;
    let covariance = list("covariance")?
        .iter()
        .map(|v| matrix_from_json(v, "policy.covariance"))
        .collect::<Result<Vec<_>>>()?;
    let policy = PolicySchedule {
        times,
        mean,
        feedforward,
        gains,
        covariance,
        u_max: field("u_max")?
            .as_f64()
            .ok_or_else(|| Error::InvalidReference("policy.u_max is not a number".into()))?,
        mass_stochastic: field("mass_stochastic")?
            .as_bool()
            .ok_or_else(|| Error::InvalidReference("policy.mass_stochastic not a bool".into()))?,
        dim: field("dim")?
            .as_u64()
            .ok_or_else(|| Error::InvalidReference("policy.dim is not an integer".into()))?
            as usize,
    };
    policy.validate()?;
    Ok(policy)
}

/// Read a manifest JSON file; `path` may also name the directory holding
/// `manifest.json`.
pub fn load_manifest(path: &Path) -> Result<Value> {
    let file = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(file.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidReference(format!("{}: {e}", file.display())))
}

/// Minimal static SVG: the mean trajectory polyline, per-node ellipses, and
/// a marker at the origin. Inputs are already in display coordinates.
pub fn svg_figure(trajectory: &[(f64, f64)], ellipses: &[Vec<(f64, f64)>], title: &str) -> String {
    let all_points = trajectory
        .iter()
        .chain(ellipses.iter().flatten())
        .chain(std::iter::once(&(0.0, 0.0)));
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for &(x, y) in all_points {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let span = (max_x - min_x).max(max_y - min_y).max(1e-12);
    let margin = 0.05 * span;
    let width = max_x - min_x + 2.0 * margin;
    let height = max_y - min_y + 2.0 * margin;
    // Flip y so the figure is right-handed.
    let px = |x: f64| x - min_x + margin;
    let py = |y: f64| max_y + margin - y;
    let stroke = span / 400.0;
    let polyline = |pts: &[(f64, f64)], color: &str, w: f64| {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.6},{:.6}", px(x), py(y)))
            .collect();
        format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{w:.6}\"/>\n",
            coords.join(" ")
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width:.6} {height:.6}\" \
         width=\"720\" height=\"720\">\n  <title>{title}</title>\n  <rect width=\"100%\" \
         height=\"100%\" fill=\"white\"/>\n"
    );
    for e in ellipses {
        let mut closed = e.clone();
        if let Some(&first) = e.first() {
            closed.push(first);
        }
        svg.push_str(&polyline(&closed, "#4682b4", stroke));
    }
    svg.push_str(&polyline(trajectory, "#111111", stroke * 2.0));
    svg.push_str(&format!(
        "  <circle cx=\"{:.6}\" cy=\"{:.6}\" r=\"{:.6}\" fill=\"#e0a100\"/>\n",
        px(0.0),
        py(0.0),
        stroke * 6.0
    ));
    if let (Some(&start), Some(&end)) = (trajectory.first(), trajectory.last()) {
        for ((x, y), color) in [(start, "#1a7f37"), (end, "#c01010")] {
            svg.push_str(&format!(
                "  <circle cx=\"{:.6}\" cy=\"{:.6}\" r=\"{:.6}\" fill=\"{color}\"/>\n",
                px(x),
                py(y),
                stroke * 4.0
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn atomic_write_replaces_without_leftovers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.tsv");
        atomic_write(&path, "first\n").unwrap();
        atomic_write(&path, "second\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second\n");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn unit_circle_ellipse_has_the_chi_square_radius() {
        let pts =
            ellipse_points((0.0, 0.0), &DMatrix::identity(2, 2), 0.95, 1.0, 0).unwrap();
        assert_eq!(pts.len(), 64);
        let expected = 5.991464547107979_f64.sqrt();
        for (x, y) in pts {
            assert_relative_eq!(x.hypot(y), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn display_scale_multiplies_radii_exactly() {
        let block = DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 1.5]);
        let base = ellipse_points((1.0, -2.0), &block, 0.9, 1.0, 0).unwrap();
        let scaled = ellipse_points((1.0, -2.0), &block, 0.9, 10.0, 0).unwrap();
        for (b, s) in base.iter().zip(&scaled) {
            assert_relative_eq!((s.0 - 1.0), 10.0 * (b.0 - 1.0), epsilon = 1e-12);
            assert_relative_eq!((s.1 + 2.0), 10.0 * (b.1 + 2.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn diagonal_block_gives_axis_aligned_semi_axes() {
        let block = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let pts = ellipse_points((0.0, 0.0), &block, 0.95, 1.0, 0).unwrap();
        let q = 5.991464547107979_f64.sqrt();
        let max_x = pts.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
        let max_y = pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        assert_relative_eq!(max_x, 2.0 * q, max_relative = 1e-3);
        assert_relative_eq!(max_y, 1.0 * q, max_relative = 1e-3);
        assert_relative_eq!(max_x / max_y, 2.0, max_relative = 1e-3);

        let singular = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(ellipse_points((0.0, 0.0), &singular, 0.95, 1.0, 3).is_err());
    }

    #[test]
    fn tables_round_trip_at_full_precision() {
        let mut out = String::new();
        let values = [
            1.0 / 3.0,
            -2.718281828459045e-7,
            5000.000000000001,
            f64::MIN_POSITIVE,
        ];
        push_row(&mut out, 7, &values);
        let line = out.trim_end();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[0], "7");
        for (field, original) in fields[1..].iter().zip(&values) {
            assert_eq!(field.parse::<f64>().unwrap(), *original);
        }
    }

    #[test]
    fn policy_json_round_trips_field_for_field() {
        let policy = PolicySchedule {
            times: vec![0.0, 0.5, 1.0],
            mean: vec![
                DVector::from_vec(vec![0.1, 0.2]),
                DVector::from_vec(vec![0.3, 1.0 / 3.0]),
                DVector::from_vec(vec![0.5, 0.6]),
            ],
            feedforward: vec![
                DVector::from_vec(vec![1e-3]),
                DVector::from_vec(vec![-2e-3]),
            ],
            gains: vec![
                DMatrix::from_row_slice(1, 2, &[0.1, -0.2]),
                DMatrix::from_row_slice(1, 2, &[0.3, 0.4]),
            ],
            covariance: vec![DMatrix::identity(2, 2); 3],
            u_max: 0.25,
            mass_stochastic: false,
            dim: 1,
        };
        let value = policy_to_json(&policy);
        let text = serde_json::to_string(&value).unwrap();
        let back = policy_from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.times, policy.times);
        assert_eq!(back.mean, policy.mean);
        assert_eq!(back.feedforward, policy.feedforward);
        assert_eq!(back.gains, policy.gains);
        assert_eq!(back.covariance, policy.covariance);
        assert_eq!(back.u_max, policy.u_max);
        assert_eq!(back.mass_stochastic, policy.mass_stochastic);
        assert_eq!(back.dim, policy.dim);

        let broken = json!({"times": [0.0, 1.0]});
        assert!(policy_from_json(&broken).is_err());
    }

    #[test]
    fn svg_contains_the_drawn_elements() {
        let trajectory = vec![(0.0, 0.0), (1.0, 0.5), (2.0, 0.0)];
        let ellipse = vec![(1.0, 0.1), (1.1, 0.0), (1.0, -0.1), (0.9, 0.0)];
        let svg = svg_figure(&trajectory, &[ellipse], "transfer");
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("<title>transfer</title>"));
        assert_eq!(
            svg.matches('<').count(),
            svg.matches('>').count(),
            "unbalanced markup"
        );
    }
}
