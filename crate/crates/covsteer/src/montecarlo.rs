//! Closed-loop validation: sample the nonlinear stochastic dynamics under
//! the solved affine policy u = F_k + K_k (x − x̄_k) and compare the ensemble
//! statistics against the optimizer's predicted covariances.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::discretize::sqrt_factor;
use crate::dynamics::{FrozenMassModel, FullModel, MassProfile, Model};
use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::stats::chi2_quantile;
use crate::steering::SteeringSolution;

/// Everything the simulator needs from a solved problem: the schedule of
/// means, feedforwards, and gains, plus the predicted node covariances the
/// ensemble is compared against. All values canonical.
#[derive(Clone, Debug)]
pub struct PolicySchedule {
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    /// Predicted node covariances (conditioning factor removed).
    pub covariance: Vec<DMatrix<f64>>,
    pub u_max: f64,
    pub mass_stochastic: bool,
    pub dim: usize,
}

impl PolicySchedule {
    pub fn from_solution(solution: &SteeringSolution) -> Self {
        PolicySchedule {
            times: solution.times.clone(),
            mean: solution.iterate.mean.clone(),
            feedforward: solution.iterate.feedforward.clone(),
            gains: solution.gains.clone(),
            covariance: (0..=solution.n_segments())
                .map(|k| solution.covariance(k))
                .collect(),
            u_max: solution.u_max,
            mass_stochastic: solution.mass_stochastic,
            dim: solution.dim,
        }
    }

    pub fn n_segments(&self) -> usize {
        self.feedforward.len()
    }
    pub fn n_x(&self) -> usize {
        self.mean.first().map_or(0, |m| m.len())
    }
    pub fn n_u(&self) -> usize {
        self.feedforward.first().map_or(0, |f| f.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_segments();
        let n_x = self.n_x();
        let n_u = self.n_u();
        let ok = self.times.len() == n + 1
            && self.mean.len() == n + 1
            && self.covariance.len() == n + 1
            && self.gains.len() == n
            && self.mean.iter().all(|m| m.len() == n_x)
            && self.covariance.iter().all(|p| p.shape() == (n_x, n_x))
            && self.feedforward.iter().all(|f| f.len() == n_u)
            && self.gains.iter().all(|k| k.shape() == (n_u, n_x));
        if !ok {
            return Err(Error::DimensionMismatch(
                "policy schedule arrays are inconsistent".into(),
            ));
        }
        if n == 0 {
            return Err(Error::DimensionMismatch(
                "policy schedule has no segments".into(),
            ));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::InvalidParameter("u_max must be positive".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidReference(
                "policy node times must increase".into(),
            ));
        }
        Ok(())
    }
}

/// Sampled closed-loop trajectories plus their per-node statistics.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub n_samples: usize,
    pub seed: u64,
    /// Position/velocity dimension of the underlying model.
    pub dim: usize,
    /// Canonical node times shared by all samples.
    pub times: Vec<f64>,
    /// Node states, indexed [sample][node].
    pub states: Vec<Vec<DVector<f64>>>,
    /// Applied (post-saturation) controls, indexed [sample][segment].
    pub controls: Vec<Vec<DVector<f64>>>,
    /// Samples whose mass hit zero (clamped and kept, but reported).
    pub flagged: Vec<usize>,
    /// Number of (sample, segment) pairs whose commanded thrust was clipped.
    pub clip_events: usize,
    /// Per-node sample mean.
    pub mean: Vec<DVector<f64>>,
    /// Per-node unbiased sample covariance, symmetrized.
    pub covariance: Vec<DMatrix<f64>>,
}

/// Per-node summary series extracted from an ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleStats {
    pub mean: Vec<DVector<f64>>,
    pub covariance: Vec<DMatrix<f64>>,
    /// Mass mean per node (empty when the state carries no mass row).
    pub mass_mean: Vec<f64>,
    /// Mass standard deviation per node (same convention).
    pub mass_std: Vec<f64>,
}

/// Fractions of samples inside the predicted confidence ellipsoids.
#[derive(Clone, Debug)]
pub struct CoverageReport {
    pub confidence: f64,
    /// Per-node inside-fraction for the position block.
    pub position: Vec<f64>,
    /// Per-node inside-fraction for the velocity block.
    pub velocity: Vec<f64>,
}

impl CoverageReport {
    pub fn worst_position(&self) -> f64 {
        self.position.iter().copied().fold(f64::INFINITY, f64::min)
    }
    pub fn worst_velocity(&self) -> f64 {
        self.velocity.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// One integrator substep: fourth-order Runge–Kutta on the drift (control
/// held over the step) plus the Itô increment g(t, x)·dw evaluated at the
/// step start, with `dw` already carrying its √dt factor. A first-order
/// Euler drift is far too coarse here — over a multi-revolution transfer its
/// truncation error dwarfs the dispersions the feedback is sized for, and
/// the policy burns propellant fighting the integrator instead of the noise.
/// The diffusion only varies through the slowly-moving mass, so evaluating
/// it once per step keeps the usual additive-noise strong order.
pub(crate) fn sde_step(
    model: &dyn Model,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    dw: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = model.diffusion(t, x)?;
    let k1 = model.drift(t, x, u)?;
    let k2 = model.drift(t + 0.5 * dt, &(x + 0.5 * dt * &k1), u)?;
    let k3 = model.drift(t + 0.5 * dt, &(x + 0.5 * dt * &k2), u)?;
    let k4 = model.drift(t + dt, &(x + dt * &k3), u)?;
    Ok(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4) + g * dw)
}

struct SamplePath {
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    clipped: usize,
    mass_flag: bool,
}

fn simulate_one(
    model: &dyn Model,
    policy: &PolicySchedule,
    chol_p0: &DMatrix<f64>,
    seed: u64,
    sample: usize,
    substeps: usize,
    clip: bool,
) -> Result<SamplePath> {
    let n = policy.n_segments();
    let n_x = policy.n_x();
    let n_w = model.n_w();
    let has_mass = model.has_mass_state();
    // Independent stream per (seed, sample index): reproducible regardless
    // of how samples are scheduled across threads.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64 + 1);
    let normal = StandardNormal;

    let z = DVector::from_fn(n_x, |_, _| normal.sample(&mut rng));
    let mut x = &policy.mean[0] + chol_p0 * z;
    let mut mass_flag = false;
    if has_mass && x[n_x - 1] <= 0.0 {
        x[n_x - 1] = MASS_CLAMP;
        mass_flag = true;
    }
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut clipped = 0;
    states.push(x.clone());
    for k in 0..n {
        let dev = &x - &policy.mean[k];
        let mut u = &policy.feedforward[k] + &policy.gains[k] * dev;
        let magnitude = u.norm();
        if clip && magnitude > policy.u_max {
            u *= policy.u_max / magnitude;
            clipped += 1;
        }
        let dt = (policy.times[k + 1] - policy.times[k]) / substeps as f64;
        let sqrt_dt = dt.sqrt();
        for s in 0..substeps {
            let t = policy.times[k] + s as f64 * dt;
            let dw = DVector::from_fn(n_w, |_, _| {
                let g: f64 = normal.sample(&mut rng);
                g * sqrt_dt
            });
            x = sde_step(model, t, &x, &u, dt, &dw)?;
            if has_mass && x[n_x - 1] <= 0.0 {
                // Keep the sample integrable; the flag is reported upstream.
                x[n_x - 1] = MASS_CLAMP;
                mass_flag = true;
            }
        }
        controls.push(u);
        states.push(x.clone());
    }
    Ok(SamplePath {
        states,
        controls,
        clipped,
        mass_flag,
    })
}

const MASS_CLAMP: f64 = 1e-9;

fn node_statistics(
    states: &[Vec<DVector<f64>>],
    n_nodes: usize,
    n_x: usize,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let n_samples = states.len();
    let mut means = Vec::with_capacity(n_nodes);
    let mut covs = Vec::with_capacity(n_nodes);
    for k in 0..n_nodes {
        let mut mean = DVector::zeros(n_x);
        for s in states {
            mean += &s[k];
        }
        mean /= n_samples as f64;
        let mut cov = DMatrix::zeros(n_x, n_x);
        if n_samples > 1 {
            for s in states {
                let d = &s[k] - &mean;
                cov.syger(1.0, &d, &d, 1.0);
            }
            cov /= (n_samples - 1) as f64;
            cov.fill_upper_triangle_with_lower_triangle();
        }
        means.push(mean);
        covs.push(cov);
    }
    (means, covs)
}

/// Simulate `n_samples` closed-loop trajectories of `model` under the
/// policy. `p_i` is the initial covariance in canonical units (its zero
/// directions are honored exactly, so a deterministic initial mass stays
/// deterministic). Samples are bitwise-reproducible for a given seed.
pub fn simulate_policy(
    model: &dyn Model,
    policy: &PolicySchedule,
    p_i: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
    substeps: usize,
    clip: bool,
) -> Result<Ensemble> {
    policy.validate()?;
    if n_samples == 0 || substeps == 0 {
        return Err(Error::InvalidParameter(
            "sample and substep counts must be ≥ 1".into(),
        ));
    }
    let n_x = policy.n_x();
    if model.n_x() != n_x || model.n_u() != policy.n_u() {
        return Err(Error::DimensionMismatch(format!(
            "model is {}×{} but the policy is {}×{}",
            model.n_x(),
            model.n_u(),
            n_x,
            policy.n_u()
        )));
    }
    if p_i.shape() != (n_x, n_x) {
        return Err(Error::DimensionMismatch(format!(
            "initial covariance is {:?}, expected {n_x}×{n_x}",
            p_i.shape()
        )));
    }
    let chol_p0 = sqrt_factor(p_i)?;
    let paths: Vec<SamplePath> = (0..n_samples)
        .into_par_iter()
        .map(|sample| simulate_one(model, policy, &chol_p0, seed, sample, substeps, clip))
        .collect::<Result<_>>()?;

    let n_nodes = policy.times.len();
    let states: Vec<Vec<DVector<f64>>> = paths.iter().map(|p| p.states.clone()).collect();
    let controls = paths.iter().map(|p| p.controls.clone()).collect();
    let flagged = paths
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.mass_flag.then_some(i))
        .collect();
    let clip_events = paths.iter().map(|p| p.clipped).sum();
    let (mean, covariance) = node_statistics(&states, n_nodes, n_x);
    Ok(Ensemble {
        n_samples,
        seed,
        dim: policy.dim,
        times: policy.times.clone(),
        states,
        controls,
        flagged,
        clip_events,
        mean,
        covariance,
    })
}

/// Simulate a scenario's solved policy against the matching nonlinear model:
/// the full mass-coupled dynamics when the solution carried a mass state,
/// otherwise the frozen-mass-profile dynamics the comparison mode optimizes.
pub fn simulate_closed_loop(
    scenario: &Scenario,
    policy: &PolicySchedule,
    n_samples: usize,
    seed: u64,
    substeps: usize,
    clip: bool,
) -> Result<Ensemble> {
    scenario.validate()?;
    policy.validate()?;
    let scales = scenario.scales()?;
    let params = scenario.params.nondimensionalize(&scales);
    let dim = scenario.dim;
    let p_full = scales.scale_state_cov(&scenario.p_i(), dim);
    if policy.mass_stochastic {
        let model = FullModel::new(params, dim)?;
        simulate_policy(&model, policy, &p_full, n_samples, seed, substeps, clip)
    } else {
        let m0 = scales.scale_mass(scenario.m_i);
        let profile =
            MassProfile::from_feedforward(&policy.times, m0, &policy.feedforward, &params)?;
        let model = FrozenMassModel::new(params, dim, profile)?;
        let p_i = p_full.view((0, 0), (2 * dim, 2 * dim)).into_owned();
        simulate_policy(&model, policy, &p_i, n_samples, seed, substeps, clip)
    }
}

/// Per-node mean/covariance plus the mass series. Requires ≥ 2 samples so
/// the n−1 divisor is defined.
pub fn ensemble_stats(ensemble: &Ensemble) -> Result<EnsembleStats> {
    if ensemble.n_samples < 2 {
        return Err(Error::InvalidParameter(
            "ensemble statistics need at least two samples".into(),
        ));
    }
    let n_x = ensemble.mean[0].len();
    let has_mass = n_x == 2 * ensemble.dim + 1;
    let (mass_mean, mass_std) = if has_mass {
        let m = n_x - 1;
        (
            ensemble.mean.iter().map(|x| x[m]).collect(),
            ensemble
                .covariance
                .iter()
                .map(|p| p[(m, m)].max(0.0).sqrt())
                .collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(EnsembleStats {
        mean: ensemble.mean.clone(),
        covariance: ensemble.covariance.clone(),
        mass_mean,
        mass_std,
    })
}

fn block_inverse(p: &DMatrix<f64>, node: usize) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(p.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| {
            let min_eig = p
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            Error::SingularCovariance { node, min_eig }
        })
}

/// For each node, the fraction of samples whose position (respectively
/// velocity) deviation from the predicted mean has Mahalanobis squared
/// distance within the χ² quantile of the predicted block covariance.
pub fn coverage_check(
    ensemble: &Ensemble,
    predicted_mean: &[DVector<f64>],
    predicted_cov: &[DMatrix<f64>],
    confidence: f64,
) -> Result<CoverageReport> {
    let n_nodes = ensemble.times.len();
    if predicted_mean.len() != n_nodes || predicted_cov.len() != n_nodes {
        return Err(Error::DimensionMismatch(format!(
            "prediction spans {} nodes, ensemble has {n_nodes}",
            predicted_mean.len()
        )));
    }
    let dim = ensemble.dim;
    let q = chi2_quantile(dim, confidence)?;
    let mut position = Vec::with_capacity(n_nodes);
    let mut velocity = Vec::with_capacity(n_nodes);
    for k in 0..n_nodes {
        let mut inside = [0usize; 2];
        let inverses = [
            block_inverse(&predicted_cov[k].view((0, 0), (dim, dim)).into_owned(), k)?,
            block_inverse(
                &predicted_cov[k].view((dim, dim), (dim, dim)).into_owned(),
                k,
            )?,
        ];
        for s in 0..ensemble.n_samples {
            let dev = &ensemble.states[s][k] - &predicted_mean[k];
            for (b, inv) in inverses.iter().enumerate() {
                let d = dev.rows(b * dim, dim);
                let m2 = (d.transpose() * inv * d)[(0, 0)];
                if m2 <= q {
                    inside[b] += 1;
                }
            }
        }
        position.push(inside[0] as f64 / ensemble.n_samples as f64);
        velocity.push(inside[1] as f64 / ensemble.n_samples as f64);
    }
    Ok(CoverageReport {
        confidence,
        position,
        velocity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{propagate_covariance, DiscreteSegment};
    use crate::dynamics::propagate_zoh;

    /// Planar cart with optional additive velocity noise.
    struct NoisyCart {
        sigma: f64,
    }

    impl Model for NoisyCart {
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
            Ok(DMatrix::from_column_slice(2, 1, &[0.0, self.sigma]))
        }
        fn mass_of(&self, _t: f64, _x: &DVector<f64>) -> f64 {
            1.0
        }
    }

    fn cart_policy(model: &NoisyCart, n: usize, h: f64, u0: f64) -> PolicySchedule {
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
        let mut mean = vec![DVector::from_vec(vec![0.0, 0.0])];
        let feedforward = vec![DVector::from_vec(vec![u0]); n];
        for k in 0..n {
            let next = propagate_zoh(
                model,
                &mean[k],
                &feedforward[k],
                times[k],
                times[k + 1],
                64,
            )
            .unwrap();
            mean.push(next);
        }
        PolicySchedule {
            times,
            mean,
            feedforward,
            gains: vec![DMatrix::zeros(1, 2); n],
            covariance: vec![DMatrix::identity(2, 2); n + 1],
            u_max: 1e6,
            mass_stochastic: false,
            dim: 1,
        }
    }

    #[test]
    fn zero_noise_zero_spread_reproduces_the_nominal() {
        let model = NoisyCart { sigma: 0.0 };
        let policy = cart_policy(&model, 8, 0.25, 0.3);
        let ensemble = simulate_policy(
            &model,
            &policy,
            &DMatrix::zeros(2, 2),
            16,
            123,
            40,
            true,
        )
        .unwrap();
        // All samples are bitwise identical (no randomness enters the path).
        for s in 1..16 {
            for k in 0..=8 {
                assert_eq!(ensemble.states[s][k], ensemble.states[0][k]);
            }
        }
        // And they track the nominal mean to the integrator's accuracy.
        for k in 0..=8 {
            let err = (&ensemble.states[0][k] - &policy.mean[k]).norm();
            assert!(err < 2e-3, "node {k} drifted {err}");
        }
        assert!(ensemble.flagged.is_empty());
        assert_eq!(ensemble.clip_events, 0);
    }

    #[test]
    fn a_fixed_seed_is_bitwise_reproducible_and_streams_differ() {
        let model = NoisyCart { sigma: 0.2 };
        let policy = cart_policy(&model, 5, 0.2, 0.1);
        let p0 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.04, 0.01]));
        let a = simulate_policy(&model, &policy, &p0, 12, 7, 10, true).unwrap();
        let b = simulate_policy(&model, &policy, &p0, 12, 7, 10, true).unwrap();
        for s in 0..12 {
            for k in 0..=5 {
                assert_eq!(a.states[s][k], b.states[s][k]);
            }
        }
        let c = simulate_policy(&model, &policy, &p0, 12, 8, 10, true).unwrap();
        assert_ne!(a.states[0][5], c.states[0][5]);
        // Distinct samples saw distinct draws.
        assert_ne!(a.states[0][5], a.states[1][5]);
    }

    #[test]
    fn open_loop_spread_matches_the_linear_covariance_recursion() {
        let model = NoisyCart { sigma: 0.15 };
        let n = 10;
        let h = 0.4;
        let policy = cart_policy(&model, n, h, 0.0);
        let p0 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.02, 0.005]));
        let ensemble = simulate_policy(&model, &policy, &p0, 1000, 42, 20, false).unwrap();

        // Discrete-time oracle: exact cart transition with the exact
        // integrated process noise for additive velocity diffusion.
        let s2 = model.sigma * model.sigma;
        let segments: Vec<DiscreteSegment> = (0..n)
            .map(|k| {
                let a = DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]);
                let q = DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        s2 * h * h * h / 3.0,
                        s2 * h * h / 2.0,
                        s2 * h * h / 2.0,
                        s2 * h,
                    ],
                );
                DiscreteSegment {
                    a,
                    b: DMatrix::from_column_slice(2, 1, &[0.5 * h * h, h]),
                    c: DVector::zeros(2),
                    q: q.clone(),
                    g: sqrt_factor(&q).unwrap(),
                    t0: k as f64 * h,
                    t1: (k + 1) as f64 * h,
                }
            })
            .collect();
        let gains = vec![DMatrix::zeros(1, 2); n];
        let predicted = propagate_covariance(&segments, &p0, &gains).unwrap();
        for k in [n / 2, n] {
            let gap = (&ensemble.covariance[k] - &predicted[k]).norm() / predicted[k].norm();
            assert!(gap < 0.15, "node {k} covariance off by {gap:.3}");
        }
        // The empirical mean stays near the nominal (zero-control coast).
        let drift = (&ensemble.mean[n] - &policy.mean[n]).norm();
        assert!(drift < 0.1, "mean drifted {drift}");
    }

    #[test]
    fn stats_match_hand_arithmetic_with_the_unbiased_divisor() {
        let mk = |v: f64| vec![DVector::from_vec(vec![v])];
        let ensemble = Ensemble {
            n_samples: 2,
            seed: 0,
            dim: 0,
            times: vec![0.0],
            states: vec![mk(0.0), mk(2.0)],
            controls: vec![vec![], vec![]],
            flagged: vec![],
            clip_events: 0,
            mean: vec![DVector::from_vec(vec![1.0])],
            covariance: vec![DMatrix::from_vec(1, 1, vec![2.0])],
        };
        let stats = ensemble_stats(&ensemble).unwrap();
        assert_eq!(stats.mean[0][0], 1.0);
        assert_eq!(stats.covariance[0][(0, 0)], 2.0);

        let single = Ensemble {
            n_samples: 1,
            states: vec![mk(0.0)],
            controls: vec![vec![]],
            ..ensemble
        };
        assert!(ensemble_stats(&single).is_err());

        // node_statistics itself applies the n−1 divisor.
        let (m, c) = node_statistics(&[mk(0.0), mk(2.0)], 1, 1);
        assert_eq!(m[0][0], 1.0);
        assert_eq!(c[0][(0, 0)], 2.0);
    }

    #[test]
    fn coverage_hits_the_confidence_level_on_exact_gaussian_draws() {
        // Draw directly from the predicted distribution and check the
        // inside-fraction lands on the nominal level.
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let chol = sqrt_factor(&cov).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        let n_samples = 100_000;
        let states: Vec<Vec<DVector<f64>>> = (0..n_samples)
            .map(|_| {
                let z = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
                vec![&mean + &chol * z]
            })
            .collect();
        let ensemble = Ensemble {
            n_samples,
            seed: 314,
            dim: 1,
            times: vec![0.0],
            states,
            controls: vec![vec![]; n_samples],
            flagged: vec![],
            clip_events: 0,
            mean: vec![mean.clone()],
            covariance: vec![cov.clone()],
        };
        let report = coverage_check(&ensemble, &[mean.clone()], &[cov.clone()], 0.95).unwrap();
        assert!((report.position[0] - 0.95).abs() < 0.01, "{report:?}");
        assert!((report.velocity[0] - 0.95).abs() < 0.01, "{report:?}");

        // Inflating the prediction drives the fraction to one.
        let inflated = coverage_check(&ensemble, &[mean.clone()], &[100.0 * &cov], 0.95).unwrap();
        assert!(inflated.position[0] > 0.9999);

        // A singular predicted block is rejected with the node index.
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let err = coverage_check(&ensemble, &[mean.clone()], &[singular], 0.95).unwrap_err();
        assert!(matches!(err, Error::SingularCovariance { node: 0, .. }));
    }

    #[test]
    fn zero_spread_samples_sit_inside_any_nonzero_prediction() {
        let mean = DVector::from_vec(vec![0.5, 0.5]);
        let states = vec![vec![mean.clone()]; 50];
        let ensemble = Ensemble {
            n_samples: 50,
            seed: 0,
            dim: 1,
            times: vec![0.0],
            states,
            controls: vec![vec![]; 50],
            flagged: vec![],
            clip_events: 0,
            mean: vec![mean.clone()],
            covariance: vec![DMatrix::zeros(2, 2)],
        };
        let report =
            coverage_check(&ensemble, &[mean], &[DMatrix::identity(2, 2)], 0.95).unwrap();
        assert_eq!(report.position[0], 1.0);
        assert_eq!(report.velocity[0], 1.0);
    }

    #[test]
    fn strong_error_shrinks_at_first_order_for_additive_noise() {
        // Integrate one segment at several resolutions against a common
        // Brownian path (coarse increments are sums of fine ones) and fit
        // the log-log slope of the endpoint error.
        let model = NoisyCart { sigma: 0.3 };
        let u = DVector::from_vec(vec![0.2]);
        let t_end = 1.0;
        let fine = 256usize;
        let levels = [8usize, 16, 32];
        let n_paths = 400;
        let mut errors = [0.0f64; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(2718);
        for _ in 0..n_paths {
            let dt_fine = t_end / fine as f64;
            let dws: Vec<f64> = (0..fine)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * dt_fine.sqrt()
                })
                .collect();
            let run = |steps: usize| {
                let dt = t_end / steps as f64;
                let chunk = fine / steps;
                let mut x = DVector::from_vec(vec![0.1, -0.2]);
                for s in 0..steps {
                    let dw_sum: f64 = dws[s * chunk..(s + 1) * chunk].iter().sum();
                    let dw = DVector::from_vec(vec![dw_sum]);
                    x = sde_step(&model, s as f64 * dt, &x, &u, dt, &dw).unwrap();
                }
                x
            };
            let reference = run(fine);
            for (i, &steps) in levels.iter().enumerate() {
                errors[i] += (run(steps) - &reference).norm();
            }
        }
        for e in &mut errors {
            *e /= n_paths as f64;
        }
        // Least-squares slope of log2(error) against log2(dt).
        let xs: Vec<f64> = levels.iter().map(|&s| -(s as f64).log2()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.log2()).collect();
        let xm = xs.iter().sum::<f64>() / 3.0;
        let ym = ys.iter().sum::<f64>() / 3.0;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - xm) * (y - ym))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();
        assert!(
            (0.4..=1.2).contains(&slope),
            "strong-order slope {slope:.3} out of band; errors {errors:?}"
        );
    }

    #[test]
    fn exhausted_mass_is_flagged_not_fatal() {
        /// Burns mass at a fixed rate regardless of control.
        struct Guzzler;
        impl Model for Guzzler {
            fn n_x(&self) -> usize {
                3
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
                Ok(DVector::from_vec(vec![x[1], u[0], -1.0]))
            }
            fn jacobians(
                &self,
                _t: f64,
                _x: &DVector<f64>,
                _u: &DVector<f64>,
            ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
                unreachable!("not discretized in this test")
            }
            fn diffusion(&self, _t: f64, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
                Ok(DMatrix::zeros(3, 1))
            }
            fn mass_of(&self, _t: f64, x: &DVector<f64>) -> f64 {
                x[2]
            }
        }
        let model = Guzzler;
        let times = vec![0.0, 0.5, 1.0];
        let mean = vec![
            DVector::from_vec(vec![0.0, 0.0, 0.6]),
            DVector::from_vec(vec![0.0, 0.0, 0.1]),
            DVector::from_vec(vec![0.0, 0.0, 1e-9]),
        ];
        let policy = PolicySchedule {
            times,
            mean,
            feedforward: vec![DVector::zeros(1); 2],
            gains: vec![DMatrix::zeros(1, 3); 2],
            covariance: vec![DMatrix::identity(3, 3); 3],
            u_max: 1.0,
            mass_stochastic: true,
            dim: 1,
        };
        let ensemble =
            simulate_policy(&model, &policy, &DMatrix::zeros(3, 3), 5, 1, 10, true).unwrap();
        assert_eq!(ensemble.flagged, vec![0, 1, 2, 3, 4]);
        for s in 0..5 {
            assert!(ensemble.states[s][2][2] > 0.0);
        }
    }
}
