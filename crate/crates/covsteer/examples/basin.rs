//! Scratch experiment: compare min-fuel basins from different cold starts.

use covsteer::initializer::{solve_min_fuel, total_impulse, InitializerOptions};
use covsteer::Scenario;
use nalgebra::DVector;

use covsteer::discretize::ReferenceTrajectory;
use covsteer::dynamics::{propagate_zoh, FullModel, Model};

fn main() {
    env_logger::init();
    let scenario = Scenario::preset("earth-mars-2d").unwrap();
    let scales = scenario.scales().unwrap();
    let params = scenario.params.nondimensionalize(&scales);
    let dim = scenario.dim;
    let model = FullModel::new(params.clone(), dim).unwrap();
    let n = scenario.n_segments;
    let t_f = scales.scale_time(scenario.t_f);
    let times: Vec<f64> = (0..=n).map(|k| t_f * k as f64 / n as f64).collect();
    let x_i = scales.scale_state(&scenario.x_i(), dim);
    let x_f = scales.scale_state(&scenario.x_f_posvel(), dim);
    let n_x = model.n_x();
    let u0 = DVector::zeros(dim);

    // Forward coast from the departure state.
    let mut fwd = vec![x_i.clone()];
    for k in 0..n {
        fwd.push(propagate_zoh(&model, &fwd[k], &u0, times[k], times[k + 1], 32).unwrap());
    }
    // Backward coast from the arrival state (mass pinned at departure value).
    let mut xf_full = DVector::zeros(n_x);
    for i in 0..2 * dim {
        xf_full[i] = x_f[i];
    }
    xf_full[n_x - 1] = x_i[n_x - 1];
    let mut bwd = vec![xf_full.clone()];
    for k in (0..n).rev() {
        let prev = propagate_zoh(&model, &bwd[0], &u0, times[k + 1], times[k], 32).unwrap();
        bwd.insert(0, prev);
    }

    let blend = |alpha_pow: f64| -> Vec<DVector<f64>> {
        (0..=n)
            .map(|k| {
                let a = (k as f64 / n as f64).powf(alpha_pow);
                let mut x = &fwd[k] * (1.0 - a) + &bwd[k] * a;
                x[n_x - 1] = x_i[n_x - 1];
                x
            })
            .collect()
    };

    let chord: Vec<DVector<f64>> = (0..=n)
        .map(|k| {
            let a = k as f64 / n as f64;
            let mut x = DVector::zeros(n_x);
            for i in 0..2 * dim {
                x[i] = (1.0 - a) * x_i[i] + a * x_f[i];
            }
            x[n_x - 1] = x_i[n_x - 1];
            x
        })
        .collect();

    let mut candidates: Vec<(String, Vec<DVector<f64>>)> = vec![
        ("fwd-coast".into(), fwd.clone()),
        ("bwd-coast".into(), bwd.clone()),
        ("blend-1.0".into(), blend(1.0)),
        ("blend-0.5".into(), blend(0.5)),
        ("blend-2.0".into(), blend(2.0)),
        ("chord".into(), chord),
    ];

    let options = InitializerOptions::default();
    for (name, states) in candidates.drain(..) {
        let cold = ReferenceTrajectory {
            times: times.clone(),
            states,
            controls: vec![u0.clone(); n],
        };
        match solve_min_fuel(&model, &x_i, &x_f, params.u_max, &cold, &options) {
            Ok(reference) => {
                let imp = total_impulse(&reference);
                let m_f = reference.states[n][n_x - 1] * 5000.0;
                println!("{name:>10}: impulse {imp:.8}  m_f {m_f:.2} kg");
            }
            Err(e) => println!("{name:>10}: FAILED ({e})"),
        }
    }
}
