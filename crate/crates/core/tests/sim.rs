mod common;

use common::*;
use dsie::distributed::{self, run_round, LossyTransport};
use dsie::model::{build_continuous, NetworkTopology, Partition};
use dsie::sim::{self, generate_measurements, simulate_truth, InitialCondition, Purpose, TruthTrajectory};
use dsie::{Mat, Vector};
use nalgebra::dvector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LOAD_STEPS: &str = r#""load_steps": {"period": 0.1, "relative_magnitude": 0.2}"#;
const NOISE_FREE: &str = r#""noise": {"process_fraction": 0.0, "measurement_fraction": 0.0}"#;

fn single_line() -> NetworkTopology {
    NetworkTopology::from_json_str(
        r#"{
            "version": 1,
            "omega_o": 376.99111843077515,
            "buses": [{"id": "b1", "nominal_voltage": 380.0}, {"id": "b2", "nominal_voltage": 375.0}],
            "lines": [{"id": "l12", "from_bus": "b1", "to_bus": "b2", "resistance": 0.3, "inductance": 0.002}],
            "dgus": [], "loads": [], "sensors": [], "areas": {}
        }"#,
    )
    .unwrap()
}

#[test]
fn line_current_follows_first_order_response() {
    let t = single_line();
    let m = build_continuous(&t).unwrap();
    let (r, l, w) = (0.3, 0.002, t.omega_o);
    let (u0, u1) = (dvector![380.0, 0.0, 375.0, 0.0], dvector![380.0, 0.0, 371.0, 6.0]);
    let (pv1, pv2) = (m.inputs.pair("v:b1").unwrap(), m.inputs.pair("v:b2").unwrap());
    let x0 = m.steady_state(&u0).unwrap();
    let ts = 1e-4;
    let inputs = vec![u1.clone(); 400];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let truth = simulate_truth(&m, ts, &inputs, &Vector::zeros(2), &InitialCondition::Given(x0.clone()), &mut rng).unwrap();

    // L di/dt = -(R + jωL) i + (v_to - v_from), complex arithmetic by hand
    let dv = (u1[pv2] - u1[pv1], u1[pv2 + 1] - u1[pv1 + 1]);
    let z = (r, w * l);
    let z2 = z.0 * z.0 + z.1 * z.1;
    let i_inf = ((dv.0 * z.0 + dv.1 * z.1) / z2, (dv.1 * z.0 - dv.0 * z.1) / z2);
    let p = m.states.pair("i:l12").unwrap();
    let i0 = (x0[p], x0[p + 1]);
    for (k, x) in truth.x.iter().enumerate() {
        let t = k as f64 * ts;
        let decay = (-r / l * t).exp();
        let (c, s) = ((w * t).cos(), (-w * t).sin());
        let e = (i0.0 - i_inf.0, i0.1 - i_inf.1);
        let expected = (i_inf.0 + decay * (e.0 * c - e.1 * s), i_inf.1 + decay * (e.0 * s + e.1 * c));
        assert!((x[p] - expected.0).abs() <= 1e-9, "d at step {k}");
        assert!((x[p + 1] - expected.1).abs() <= 1e-9, "q at step {k}");
    }
}

#[test]
fn halving_the_step_leaves_the_trajectory_unchanged() {
    let exp = experiment("four_bus.json", &format!(r#""duration": 1.0, "seed": 2, {LOAD_STEPS}"#));
    let coarse = exp.input_schedule(0).unwrap();
    let fine: Vec<Vector> = coarse.iter().flat_map(|u| [u.clone(), u.clone()]).collect();
    let zero = Vector::zeros(exp.truth.states.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ts = exp.scenario.ts;
    let a = simulate_truth(&exp.truth, ts, &coarse, &zero, &InitialCondition::SteadyState, &mut rng).unwrap();
    let b = simulate_truth(&exp.truth, ts / 2.0, &fine, &zero, &InitialCondition::SteadyState, &mut rng).unwrap();
    let scale = exp.nominal.x_magnitude.max();
    let worst = (0..a.len())
        .map(|k| (&a.x[k] - &b.x[2 * k]).amax())
        .fold(0.0, f64::max);
    assert!(worst / scale < 1e-12, "relative deviation {:.3e}", worst / scale);
}

#[test]
fn constant_inputs_hold_the_equilibrium() {
    let exp = experiment("thirteen_bus.json", &format!(r#""duration": 0.5, {NOISE_FREE}"#));
    let truth = exp.simulate_truth(0).unwrap();
    let scale = exp.nominal.x_magnitude.max();
    for x in &truth.x {
        assert!((x - &exp.nominal.x).amax() <= 1e-9 * scale);
    }
    // and the equilibrium solves Ax + Bu = 0
    let residual = &exp.truth.a * &exp.nominal.x + &exp.truth.b * &exp.nominal.u;
    assert!(residual.amax() <= 1e-9 * (exp.truth.a.amax() * scale));
}

#[test]
fn measurement_noise_has_the_configured_spread() {
    let n = 100_000;
    let truth = TruthTrajectory {
        times: (0..n).map(|k| k as f64).collect(),
        x: vec![dvector![1.0, -2.0]; n],
        u: vec![dvector![3.0]; n],
    };
    let std_x = dvector![0.25, 4.0];
    let std_u = dvector![1e-3];
    let mut rng = sim::stream_rng(42, 0, Purpose::Measurement);
    let z = generate_measurements(&truth, &Mat::identity(2, 2), &Mat::identity(1, 1), &std_x, &std_u, &mut rng);
    let spread = |values: Vec<f64>| {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    };
    for (i, s) in std_x.iter().enumerate() {
        let emp = spread(z.z_x.iter().map(|z| z[i]).collect());
        assert!((emp / s - 1.0).abs() <= 0.02, "channel {i}: {emp} vs {s}");
    }
    let emp = spread(z.z_u.iter().map(|z| z[0]).collect());
    assert!((emp / std_u[0] - 1.0).abs() <= 0.02);
}

#[test]
fn pipeline_is_deterministic_per_seed() {
    let fields = r#""duration": 1.0, "seed": 5, "load_steps": {"period": 0.1, "relative_magnitude": 0.2},
        "attacks": [{"window": [0.5, 0.7], "target": "both", "mode": {"kind": "stealthy-wls", "magnitude": 0.1},
                     "channels": ["v:b2", "v:b3"]}]"#;
    let exp = experiment("four_bus.json", fields);
    let a = exp.replicate(0).unwrap();
    let b = experiment("four_bus.json", fields).replicate(0).unwrap();
    assert_eq!(a, b);
    let c = exp.replicate(1).unwrap();
    assert_ne!(a.1, c.1);
    assert_ne!(a.0.u, c.0.u);
    assert_ne!(sim::derived_seed(5, 0, Purpose::Transport), sim::derived_seed(5, 1, Purpose::Transport));
}

#[test]
fn dissipative_network_loses_energy_without_sources() {
    let t = fixture("four_bus.json");
    let m = build_continuous(&t).unwrap();
    // stored energy weights: L for currents, C for capacitive bus voltages
    let mut weight = Vector::zeros(m.states.dim());
    for id in m.states.ids() {
        let (kind, name) = id.split_once(':').unwrap();
        let w = match kind {
            "i" => t.lines.iter().find(|l| l.id == name).unwrap().inductance,
            "it" => t.dgus.iter().find(|d| d.id == name).unwrap().inductance,
            "v" => {
                let own = t.buses.iter().find(|b| b.id == name).unwrap().capacitance.unwrap_or(0.0);
                own + t.dgus.iter().filter(|d| d.at_bus == name).map(|d| d.capacitance).sum::<f64>()
            }
            _ => panic!("unexpected state {id}"),
        };
        let p = m.states.pair(id).unwrap();
        weight[p] = w;
        weight[p + 1] = w;
    }
    let u0 = t.nominal_inputs(&m.inputs);
    let x0 = m.steady_state(&u0).unwrap();
    let inputs = vec![Vector::zeros(m.inputs.dim()); 2000];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let truth = simulate_truth(&m, 1e-4, &inputs, &Vector::zeros(x0.len()), &InitialCondition::Given(x0), &mut rng).unwrap();
    let energy: Vec<f64> = truth.x.iter().map(|x| 0.5 * x.component_mul(x).dot(&weight)).collect();
    for k in 1..energy.len() {
        assert!(energy[k] < energy[k - 1], "energy rose at step {k}");
    }
    assert!(energy.last().unwrap() / energy[0] < 1e-3);
}

/// Normalized state MSE over steps after the first 50.
fn nmse(estimates: &[Vector], truth: &TruthTrajectory, mags: &Vector) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for (k, x) in estimates.iter().enumerate().skip(50) {
        sum += (x - &truth.x[k]).component_div(mags).norm_squared();
        count += x.len();
    }
    sum / count as f64
}

fn all_estimators(fields: &str, with_tracking: bool) {
    let exp = experiment("four_bus.json", fields);
    let (truth, streams) = exp.replicate(0).unwrap();
    let mags = &exp.nominal.x_magnitude;
    let len = truth.len();

    let mut dsie = vec![exp.initial_estimate().0];
    run_dsie(dsie_state(&exp), &streams, |_, out| dsie.push(out.state.x_hat.clone()));
    assert!(nmse(&dsie, &truth, mags) <= 1e-12, "dsie {:.3e}", nmse(&dsie, &truth, mags));

    let wls: Vec<Vector> = (0..len)
        .map(|k| {
            dsie::estimator::wls_snapshot(&streams.z_x[k], &streams.z_u[k], &exp.filter_model, exp.scenario.detection.threshold())
                .unwrap()
                .x_hat
        })
        .collect();
    assert!(nmse(&wls, &truth, mags) <= 1e-12, "wls {:.3e}", nmse(&wls, &truth, mags));

    if with_tracking {
        let mut tse = Vec::new();
        run_tse(tse_state(&exp), &streams, |_, s, _| tse.push(s.x_hat()));
        assert!(nmse(&tse, &truth, mags) <= 1e-12, "tse {:.3e}", nmse(&tse, &truth, mags));
    }

    let mut areas = Areas::new(&exp, &Partition::from_topology(&exp.filter_topology));
    let mut transport = LossyTransport::lossless();
    let mut dist = vec![exp.initial_estimate().0];
    for k in 1..len {
        let meas = areas.measurements(&streams, k);
        run_round(&mut areas.estimators, &meas, &mut transport).unwrap();
        let mut x = Vector::zeros(exp.filter_model.n());
        for (a, est) in areas.estimators.iter().enumerate() {
            for (i, &g) in areas.x_idx[a].iter().enumerate() {
                x[g] = est.state.x_hat[i];
            }
        }
        dist.push(x);
    }
    assert!(nmse(&dist, &truth, mags) <= 1e-12, "distributed {:.3e}", nmse(&dist, &truth, mags));
    assert_eq!(distributed::SHARE_MESSAGE_VERSION, 1);
}

#[test]
fn noise_free_run_is_exact_for_every_estimator() {
    all_estimators(&format!(r#""duration": 1.0, "seed": 3, {NOISE_FREE}"#), true);
}

#[test]
fn noise_free_run_with_load_steps_is_exact_for_model_based_estimators() {
    all_estimators(&format!(r#""duration": 1.0, "seed": 3, {LOAD_STEPS}, {NOISE_FREE}"#), false);
}

#[test]
fn truth_stays_finite_on_a_uniform_grid() {
    let exp = experiment("thirteen_bus.json", &format!(r#""duration": 0.5, "seed": 8, {LOAD_STEPS}"#));
    let truth = exp.simulate_truth(0).unwrap();
    assert_eq!(truth.len(), exp.steps() + 1);
    for (k, t) in truth.times.iter().enumerate() {
        assert!((t - k as f64 * exp.scenario.ts).abs() < 1e-12);
    }
    assert!(truth.x.iter().all(|x| x.iter().all(|v| v.is_finite())));
}
