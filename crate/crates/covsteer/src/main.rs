//! Command-line front end: solve, validate, and compare robust low-thrust
//! transfer designs, writing plain-text tables plus a JSON run manifest.
//!
//! Log verbosity follows the `RUST_LOG` environment variable (the SCP
//! iteration lines are emitted at `info`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use covsteer::artifacts::{self, RunArtifacts};
use covsteer::error::{Error, Result};
use covsteer::initializer::{self, InitializerOptions};
use covsteer::montecarlo::{self, PolicySchedule};
use covsteer::scale::ScaleSet;
use covsteer::scenario::{self, Scenario};
use covsteer::steering::{self, TerminalCovarianceMode};

const NEWTONS_PER_KM_FORCE: f64 = 1e3;
const ELLIPSE_CONFIDENCE: f64 = 0.95;
const ELLIPSE_DISPLAY_SCALE: f64 = 10.0;

#[derive(Parser)]
#[command(
    name = "covsteer",
    version,
    about = "Robust low-thrust trajectory design by chance-constrained covariance steering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file path.
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    /// Bundled scenario name (see `--preset help` output on error).
    #[arg(long)]
    preset: Option<String>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<(Scenario, String)> {
        if let Some(path) = &self.scenario {
            Ok((
                scenario::parse_scenario(path)?,
                path.display().to_string(),
            ))
        } else if let Some(name) = &self.preset {
            Ok((Scenario::preset(name)?, format!("preset:{name}")))
        } else {
            Err(Error::InvalidParameter(format!(
                "provide --scenario <path> or --preset <name>; bundled presets: {}",
                scenario::PRESET_NAMES.join(", ")
            )))
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum TerminalCovArg {
    UpperBound,
    Equality,
    PosvelEquality,
}

#[derive(Args)]
struct OverrideArgs {
    /// Treat the mass as a stochastic state (on) or a frozen profile (off).
    #[arg(long, value_enum)]
    mass_stochastic: Option<OnOff>,
    /// Terminal covariance handling.
    #[arg(long, value_enum)]
    terminal_cov: Option<TerminalCovArg>,
    /// Cap on SCP iterations.
    #[arg(long)]
    max_iters: Option<usize>,
}

impl OverrideArgs {
    fn apply(&self, scenario: &mut Scenario) {
        if let Some(flag) = self.mass_stochastic {
            scenario.mass_stochastic = matches!(flag, OnOff::On);
        }
        if let Some(mode) = self.terminal_cov {
            scenario.config.terminal_covariance = match mode {
                TerminalCovArg::UpperBound => TerminalCovarianceMode::UpperBound,
                TerminalCovArg::Equality => TerminalCovarianceMode::Equality,
                TerminalCovArg::PosvelEquality => TerminalCovarianceMode::PosVelEquality,
            };
        }
        if let Some(n) = self.max_iters {
            scenario.config.max_iterations = n;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the deterministic minimum-fuel transfer and save the nominal.
    Reference {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Design the covariance-steering policy and write all solution tables.
    Solve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        overrides: OverrideArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo validation of a saved solve run.
    Simulate {
        /// A solve output directory (or its manifest.json).
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Integrator substeps per segment.
        #[arg(long, default_value_t = 20)]
        substeps: usize,
        /// Apply commanded thrust without saturating at u_max.
        #[arg(long)]
        no_clip: bool,
        /// Also dump every sampled trajectory to samples.tsv.
        #[arg(long)]
        dump_samples: bool,
    },
    /// Solve twice (stochastic vs frozen mass) from one reference and
    /// tabulate the dispersion and thrust differences.
    CompareMass {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        overrides: OverrideArgs,
        #[arg(long)]
        out: PathBuf,
        /// Recorded in the manifest so downstream simulations of both legs
        /// share it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the subproblem's variable, equality, and cone counts.
    Census {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Optionally also write census.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Reference { scenario, out } => cmd_reference(&scenario, &out),
        Command::Solve {
            scenario,
            overrides,
            out,
        } => cmd_solve(&scenario, &overrides, &out),
        Command::Simulate {
            solution,
            out,
            samples,
            seed,
            substeps,
            no_clip,
            dump_samples,
        } => cmd_simulate(&solution, &out, samples, seed, substeps, !no_clip, dump_samples),
        Command::CompareMass {
            scenario,
            overrides,
            out,
            seed,
        } => cmd_compare_mass(&scenario, &overrides, &out, seed),
        Command::Census {
            scenario,
            overrides,
            out,
        } => cmd_census(&scenario, &overrides, out.as_deref()),
    }
}

fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Final mean mass in kg: read off the state when the mass is a state,
/// otherwise reconstruct the frozen profile from the feedforwards.
fn final_mass_kg(scenario: &Scenario, scales: &ScaleSet, policy: &PolicySchedule) -> Result<f64> {
    let n_x = policy.n_x();
    if n_x == 2 * scenario.dim + 1 {
        let m = policy.mean.last().expect("validated nonempty")[n_x - 1];
        Ok(scales.unscale_mass(m))
    } else {
        let params = scenario.params.nondimensionalize(scales);
        let profile = covsteer::dynamics::MassProfile::from_feedforward(
            &policy.times,
            scales.scale_mass(scenario.m_i),
            &policy.feedforward,
            &params,
        )?;
        Ok(scales.unscale_mass(*profile.node_masses().last().expect("nonempty")))
    }
}

fn peak_thrust_newtons(scales: &ScaleSet, policy: &PolicySchedule) -> f64 {
    policy
        .feedforward
        .iter()
        .map(|f| scales.unscale_force(f.norm()) * NEWTONS_PER_KM_FORCE)
        .fold(0.0, f64::max)
}

fn peak_position_trace_km2(scenario: &Scenario, scales: &ScaleSet, policy: &PolicySchedule) -> f64 {
    policy
        .covariance
        .iter()
        .map(|p| {
            let phys = scales.unscale_state_cov(p, scenario.dim);
            (0..scenario.dim).map(|i| phys[(i, i)]).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn cmd_reference(args: &ScenarioArgs, out: &std::path::Path) -> Result<()> {
    let (scenario, origin) = args.load()?;
    let scales = scenario.scales()?;
    let reference = initializer::solve_reference(&scenario, &InitializerOptions::default())?;
    let mut run = RunArtifacts::new(out)?;
    run.write("scenario.scn", &scenario::write_scenario(&scenario))?;
    let ref_path = run.dir.join("reference.txt");
    initializer::write_reference(&ref_path, &reference)?;
    run.files.push(ref_path);
    let n = reference.n_segments();
    let final_mass = scales.unscale_mass(reference.states[n][reference.states[n].len() - 1]);
    let impulse = initializer::total_impulse(&reference);
    let manifest = json!({
        "schema": "covsteer-run/1",
        "command": "reference",
        "created_unix": unix_time(),
        "scenario": origin,
        "segments": n,
        "final_mass_kg": final_mass,
        "impulse_canonical": impulse,
        "files": run.file_names(),
    });
    run.write("manifest.json", &pretty(&manifest))?;
    println!(
        "reference: {} segments, final mass {:.2} kg → {}",
        n,
        final_mass,
        run.dir.display()
    );
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serialization is infallible here");
    s.push('\n');
    s
}

fn solve_pipeline(scenario: &Scenario) -> Result<(covsteer::SteeringSolution, Vec<f64>)> {
    let reference = initializer::solve_reference(scenario, &InitializerOptions::default())?;
    let solution = steering::scp_solve(scenario, &reference, &scenario.config)?;
    let tau: Vec<f64> = (0..solution.n_segments()).map(|k| solution.tau(k)).collect();
    Ok((solution, tau))
}

fn write_solution_artifacts(
    run: &mut RunArtifacts,
    scenario: &Scenario,
    scales: &ScaleSet,
    solution: &covsteer::SteeringSolution,
    tau: &[f64],
) -> Result<PolicySchedule> {
    let policy = PolicySchedule::from_solution(solution);
    run.write("scenario.scn", &scenario::write_scenario(scenario))?;
    let ref_path = run.dir.join("reference.txt");
    initializer::write_reference(&ref_path, &solution.reference())?;
    run.files.push(ref_path);
    run.write("nodes.tsv", &artifacts::node_table(scenario, scales, &policy))?;
    run.write(
        "covariance.tsv",
        &artifacts::covariance_table(scenario, scales, &policy),
    )?;
    run.write(
        "feedforward.tsv",
        &artifacts::feedforward_table(scenario, scales, &policy, tau),
    )?;
    run.write("gains.tsv", &artifacts::gain_table(scenario, scales, &policy))?;
    run.write("iterations.tsv", &artifacts::iteration_table(solution))?;
    let (means, blocks) = artifacts::position_blocks(scenario, scales, &policy);
    run.write(
        "ellipses.tsv",
        &artifacts::emit_ellipses(&means, &blocks, ELLIPSE_CONFIDENCE, ELLIPSE_DISPLAY_SCALE)?,
    )?;
    let ellipse_polylines: Vec<Vec<(f64, f64)>> = means
        .iter()
        .zip(&blocks)
        .enumerate()
        .map(|(node, (m, b))| {
            artifacts::ellipse_points(*m, b, ELLIPSE_CONFIDENCE, ELLIPSE_DISPLAY_SCALE, node)
        })
        .collect::<Result<_>>()?;
    run.write(
        "trajectory.svg",
        &artifacts::svg_figure(
            &means,
            &ellipse_polylines,
            "transfer with 95% position ellipses (×10)",
        ),
    )?;
    Ok(policy)
}

fn certification_json(solution: &covsteer::SteeringSolution) -> Result<serde_json::Value> {
    let cert = solution.certify()?;
    Ok(json!({
        "schur_min_eig": cert.schur_min_eig,
        "recursion_residual": cert.recursion_residual,
        "control_slack_min": cert.control_slack_min,
        "feedback_bound_slack_min": cert.feedback_bound_slack_min,
        "zeta_max": cert.zeta_max,
        "gain_residual": cert.gain_residual,
    }))
}

fn cmd_solve(args: &ScenarioArgs, overrides: &OverrideArgs, out: &std::path::Path) -> Result<()> {
    let (mut scenario, origin) = args.load()?;
    overrides.apply(&mut scenario);
    let scales = scenario.scales()?;
    let (solution, tau) = solve_pipeline(&scenario)?;
    let mut run = RunArtifacts::new(out)?;
    let policy = write_solution_artifacts(&mut run, &scenario, &scales, &solution, &tau)?;
    let final_mass = final_mass_kg(&scenario, &scales, &policy)?;
    let sigma_mf = solution.final_mass().map(|_| {
        let n = solution.n_segments();
        let p = scales.unscale_state_cov(&solution.covariance(n), scenario.dim);
        p[(p.nrows() - 1, p.ncols() - 1)].max(0.0).sqrt()
    });
    let manifest = json!({
        "schema": "covsteer-run/1",
        "command": "solve",
        "created_unix": unix_time(),
        "scenario": origin,
        "mass_stochastic": scenario.mass_stochastic,
        "terminal_covariance": format!("{:?}", scenario.config.terminal_covariance),
        "converged": solution.converged,
        "iterations": solution.iterations,
        "j3_canonical": solution.j3,
        "final_mean_mass_kg": final_mass,
        "final_mass_std_kg": sigma_mf,
        "peak_feedforward_thrust_n": peak_thrust_newtons(&scales, &policy),
        "peak_position_cov_trace_km2": peak_position_trace_km2(&scenario, &scales, &policy),
        "certification": certification_json(&solution)?,
        "policy": artifacts::policy_to_json(&policy),
        "files": run.file_names(),
    });
    run.write("manifest.json", &pretty(&manifest))?;
    println!(
        "solve: converged={} iterations={} final mass {:.2} kg → {}",
        solution.converged,
        solution.iterations,
        final_mass,
        run.dir.display()
    );
    Ok(())
}

fn cmd_simulate(
    solution_path: &std::path::Path,
    out: &std::path::Path,
    samples: usize,
    seed: u64,
    substeps: usize,
    clip: bool,
    dump_samples: bool,
) -> Result<()> {
    let manifest = artifacts::load_manifest(solution_path)?;
    let policy = artifacts::policy_from_json(manifest.get("policy").ok_or_else(|| {
        Error::InvalidReference(format!(
            "{}: manifest has no policy (was this a solve run?)",
            solution_path.display()
        ))
    })?)?;
    let scn_path = if solution_path.is_dir() {
        solution_path.join("scenario.scn")
    } else {
        solution_path
            .parent()
            .unwrap_or_else(|| std::path::Path::new("."))
            .join("scenario.scn")
    };
    let scenario = scenario::parse_scenario(&scn_path)?;
    let scales = scenario.scales()?;
    let ensemble = montecarlo::simulate_closed_loop(&scenario, &policy, samples, seed, substeps, clip)?;
    let stats = montecarlo::ensemble_stats(&ensemble)?;
    let coverage =
        montecarlo::coverage_check(&ensemble, &policy.mean, &policy.covariance, ELLIPSE_CONFIDENCE)?;
    let mut run = RunArtifacts::new(out)?;
    run.write(
        "ensemble.tsv",
        &artifacts::ensemble_table(&scenario, &scales, &ensemble, &coverage),
    )?;
    if dump_samples {
        run.write(
            "samples.tsv",
            &artifacts::samples_table(&scenario, &scales, &ensemble),
        )?;
    }
    let final_mass = (!stats.mass_mean.is_empty()).then(|| {
        (
            scales.unscale_mass(*stats.mass_mean.last().unwrap()),
            scales.unscale_mass(*stats.mass_std.last().unwrap()),
        )
    });
    let manifest = json!({
        "schema": "covsteer-run/1",
        "command": "simulate",
        "created_unix": unix_time(),
        "solution": solution_path.display().to_string(),
        "samples": samples,
        "seed": seed,
        "substeps": substeps,
        "clipped": clip,
        "clip_events": ensemble.clip_events,
        "flagged_samples": ensemble.flagged,
        "coverage_confidence": ELLIPSE_CONFIDENCE,
        "worst_position_coverage": coverage.worst_position(),
        "worst_velocity_coverage": coverage.worst_velocity(),
        "empirical_final_mass_kg": final_mass.map(|(m, _)| m),
        "empirical_final_mass_std_kg": final_mass.map(|(_, s)| s),
        "files": run.file_names(),
    });
    run.write("manifest.json", &pretty(&manifest))?;
    println!(
        "simulate: {} samples, worst coverage pos {:.3} vel {:.3}, {} clip events → {}",
        samples,
        coverage.worst_position(),
        coverage.worst_velocity(),
        ensemble.clip_events,
        run.dir.display()
    );
    Ok(())
}

fn cmd_compare_mass(
    args: &ScenarioArgs,
    overrides: &OverrideArgs,
    out: &std::path::Path,
    seed: u64,
) -> Result<()> {
    let (mut scenario, origin) = args.load()?;
    overrides.apply(&mut scenario);
    let scales = scenario.scales()?;
    // One reference for both legs so the mass flag is the only difference.
    let reference = initializer::solve_reference(&scenario, &InitializerOptions::default())?;

    let mut stochastic = scenario.clone();
    stochastic.mass_stochastic = true;
    let sol_s = steering::scp_solve(&stochastic, &reference, &stochastic.config)?;
    let pol_s = PolicySchedule::from_solution(&sol_s);

    let mut frozen = scenario.clone();
    frozen.mass_stochastic = false;
    let sol_f = steering::scp_solve(&frozen, &reference, &frozen.config)?;
    let pol_f = PolicySchedule::from_solution(&sol_f);

    let trace_s = peak_position_trace_km2(&stochastic, &scales, &pol_s);
    let trace_f = peak_position_trace_km2(&frozen, &scales, &pol_f);
    let thrust_s = peak_thrust_newtons(&scales, &pol_s);
    let thrust_f = peak_thrust_newtons(&scales, &pol_f);
    let mass_s = final_mass_kg(&stochastic, &scales, &pol_s)?;
    let mass_f = final_mass_kg(&frozen, &scales, &pol_f)?;

    let mut table = String::from(
        "# metric\tstochastic_mass\tdeterministic_mass\tratio\n\
         # traces km², thrust N, mass kg; ratio = stochastic / deterministic\n",
    );
    for (name, a, b) in [
        ("peak_position_cov_trace_km2", trace_s, trace_f),
        ("peak_feedforward_thrust_n", thrust_s, thrust_f),
        ("final_mean_mass_kg", mass_s, mass_f),
    ] {
        table.push_str(&format!("{name}\t{a}\t{b}\t{}\n", a / b));
    }
    let mut run = RunArtifacts::new(out)?;
    run.write("scenario.scn", &scenario::write_scenario(&scenario))?;
    let ref_path = run.dir.join("reference.txt");
    initializer::write_reference(&ref_path, &reference)?;
    run.files.push(ref_path);
    run.write("comparison.tsv", &table)?;
    run.write(
        "iterations-stochastic.tsv",
        &artifacts::iteration_table(&sol_s),
    )?;
    run.write(
        "iterations-deterministic.tsv",
        &artifacts::iteration_table(&sol_f),
    )?;
    let manifest = json!({
        "schema": "covsteer-run/1",
        "command": "compare-mass",
        "created_unix": unix_time(),
        "scenario": origin,
        "seed": seed,
        "legs": {
            "stochastic": {
                "converged": sol_s.converged,
                "iterations": sol_s.iterations,
                "peak_position_cov_trace_km2": trace_s,
                "peak_feedforward_thrust_n": thrust_s,
                "final_mean_mass_kg": mass_s,
                "policy": artifacts::policy_to_json(&pol_s),
            },
            "deterministic": {
                "converged": sol_f.converged,
                "iterations": sol_f.iterations,
                "peak_position_cov_trace_km2": trace_f,
                "peak_feedforward_thrust_n": thrust_f,
                "final_mean_mass_kg": mass_f,
                "policy": artifacts::policy_to_json(&pol_f),
            },
        },
        "trace_ratio": trace_s / trace_f,
        "thrust_ratio": thrust_s / thrust_f,
        "files": run.file_names(),
    });
    run.write("manifest.json", &pretty(&manifest))?;
    println!(
        "compare-mass: peak dispersion {:+.2}% and peak thrust {:+.2}% with stochastic mass → {}",
        100.0 * (trace_s / trace_f - 1.0),
        100.0 * (thrust_s / thrust_f - 1.0),
        run.dir.display()
    );
    Ok(())
}

fn cmd_census(
    args: &ScenarioArgs,
    overrides: &OverrideArgs,
    out: Option<&std::path::Path>,
) -> Result<()> {
    let (mut scenario, _origin) = args.load()?;
    overrides.apply(&mut scenario);
    let n_x = if scenario.mass_stochastic {
        2 * scenario.dim + 1
    } else {
        2 * scenario.dim
    };
    let report = steering::census(n_x, scenario.dim, scenario.n_segments, &scenario.config);
    print!("{report}");
    if let Some(dir) = out {
        let mut run = RunArtifacts::new(dir)?;
        run.write("census.txt", &report.to_string())?;
    }
    Ok(())
}
