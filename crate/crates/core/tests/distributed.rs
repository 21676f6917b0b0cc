mod common;

use approx::assert_relative_eq;
use common::*;
use dsie::distributed::{
    self, cross_check, fuse, local_phase, run_round, CrossCheckReport, LossyTransport, ShareMessage,
};
use dsie::estimator::{self, JointEstimate};
use dsie::model::Partition;
use dsie::numerics;
use dsie::sim::Experiment;
use dsie::{Mat, Vector};

const LOAD_STEPS: &str = r#""load_steps": {"period": 0.1, "relative_magnitude": 0.2}"#;

fn two_area(fields: &str) -> (Experiment, Areas) {
    let exp = experiment("four_bus.json", fields);
    let areas = Areas::new(&exp, &Partition::from_topology(&exp.filter_topology));
    assert_eq!(areas.estimators.len(), 2);
    (exp, areas)
}

/// Local outputs and cross-checks of both areas for round `k` without
/// advancing the filters.
fn exchange(areas: &Areas, streams: &dsie::sim::MeasurementStreams, k: usize) -> Vec<(distributed::LocalOutput, CrossCheckReport)> {
    let meas = areas.measurements(streams, k);
    let locals: Vec<_> = areas
        .estimators
        .iter()
        .zip(&meas)
        .map(|(e, z)| local_phase(e, &z.z_u_prev, &z.z_x_now).unwrap())
        .collect();
    (0..2)
        .map(|a| {
            let est = &areas.estimators[a];
            let msg = &locals[1 - a].messages[0];
            let check = cross_check(&est.area_id, &locals[a].joint, msg, &est.neighbors[&msg.sender], 3.0).unwrap();
            (locals[a].clone(), check)
        })
        .collect()
}

#[test]
fn noise_free_areas_track_the_truth() {
    let fields = format!(
        r#""duration": 0.5, "seed": 1, {LOAD_STEPS}, "noise": {{"process_fraction": 0.0, "measurement_fraction": 0.0}}"#
    );
    let (exp, mut areas) = two_area(&fields);
    let (truth, streams) = exp.replicate(0).unwrap();
    let mut transport = LossyTransport::lossless();
    let scale = exp.nominal.x_magnitude.max();
    for k in 1..truth.len() {
        let meas = areas.measurements(&streams, k);
        let reports = run_round(&mut areas.estimators, &meas, &mut transport).unwrap();
        for (a, r) in reports.iter().enumerate() {
            let x_true = distributed::gather(&truth.x[k], &areas.x_idx[a]);
            let u_true = distributed::gather(&truth.u[k - 1], &areas.u_idx[a]);
            assert!((&areas.estimators[a].state.x_hat - x_true).amax() <= 1e-8 * scale, "area {a} step {k}");
            assert!((&r.fused.u_hat - u_true).amax() <= 1e-8 * scale);
            assert!(r.transport_errors.is_empty());
            for c in &r.cross_checks {
                assert!(c.difference.iter().all(|d| *d <= 1e-8 * scale));
                assert!(c.accept.iter().all(|a| *a));
            }
        }
    }
}

#[test]
fn messages_carry_the_marginal_input_covariance() {
    let (exp, areas) = two_area(r#""duration": 0.1, "seed": 2"#);
    let (_, streams) = exp.replicate(0).unwrap();
    for (a, est) in areas.estimators.iter().enumerate() {
        let meas = &areas.measurements(&streams, 1)[a];
        let out = local_phase(est, &meas.z_u_prev, &meas.z_x_now).unwrap();
        let model = &areas.models[a].model;
        let n = model.n();
        let names = model.input_coordinates();
        for msg in &out.messages {
            // locate rows by name, independent of the selection map
            let rows: Vec<usize> = msg
                .coordinates
                .iter()
                .map(|c| names.iter().position(|x| x == c).unwrap())
                .collect();
            for (i, &ri) in rows.iter().enumerate() {
                assert_eq!(msg.u_hat[i], out.joint.u_hat[ri]);
                for (j, &rj) in rows.iter().enumerate() {
                    assert_eq!(msg.p_u[i][j], out.joint.cov[(n + ri, n + rj)]);
                }
            }
            assert!(numerics::is_symmetric_psd(&msg.covariance()));
        }
    }
}

#[test]
fn fusion_matches_information_form() {
    let (exp, areas) = two_area(&format!(r#""duration": 0.2, "seed": 5, {LOAD_STEPS}"#));
    let (_, streams) = exp.replicate(0).unwrap();
    for k in [1, 57, 150] {
        let rounds = exchange(&areas, &streams, k);
        for (a, (local, check)) in rounds.iter().enumerate() {
            let msg = &rounds[1 - a].0.messages[0];
            let fused = fuse(&local.joint, &[(msg, check)]).unwrap();
            let accepted: Vec<usize> = (0..check.accept.len()).filter(|&c| check.accept[c]).collect();
            assert!(!accepted.is_empty());
            let dim = local.joint.cov.nrows();
            let n = local.joint.x_hat.len();
            let mut t = Mat::zeros(accepted.len(), dim);
            for (r, &c) in accepted.iter().enumerate() {
                t[(r, n + check.local_rows[c])] = 1.0;
            }
            let p_j = Mat::from_fn(accepted.len(), accepted.len(), |i, j| msg.p_u[accepted[i]][accepted[j]]);
            let u_j = Vector::from_iterator(accepted.len(), accepted.iter().map(|&c| msg.u_hat[c]));
            let u_inv = local.joint.cov.clone().try_inverse().unwrap();
            let p_inv = p_j.try_inverse().unwrap();
            let info = &u_inv + t.transpose() * &p_inv * &t;
            let cov = info.try_inverse().unwrap();
            let theta = &cov * (&u_inv * local.joint.stacked() + t.transpose() * &p_inv * u_j);
            assert!(rel_err(&fused.stacked(), &theta) <= 1e-10);
            assert!((&fused.cov - &cov).norm() <= 1e-10 * cov.norm());
            // information never removed
            assert!(fused.p_x().trace() <= local.joint.p_x().trace() * (1.0 + 1e-12));
            assert!(fused.p_u().trace() <= local.joint.p_u().trace() * (1.0 + 1e-12));
        }
    }
}

fn scalar_joint(value: f64, var: f64) -> JointEstimate {
    JointEstimate {
        x_hat: Vector::from_element(1, 0.0),
        u_hat: Vector::from_element(1, value),
        cov: Mat::from_diagonal(&Vector::from_vec(vec![1.0, var])),
        step: 0,
    }
}

fn scalar_message(value: f64, var: f64) -> (ShareMessage, CrossCheckReport) {
    let msg = ShareMessage {
        version: distributed::SHARE_MESSAGE_VERSION,
        sender: "B".into(),
        receiver: "A".into(),
        step: 0,
        coordinates: vec!["v:b.d".into()],
        u_hat: vec![value],
        p_u: vec![vec![var]],
        flagged: vec![false],
    };
    let report = CrossCheckReport {
        sender: "B".into(),
        coordinates: msg.coordinates.clone(),
        local_rows: vec![0],
        difference: vec![0.0],
        bound: vec![f64::INFINITY],
        accept: vec![true],
        kappa: 3.0,
    };
    (msg, report)
}

#[test]
fn fused_variance_is_the_harmonic_combination() {
    for (s1, s2) in [(1.0, 1.0), (0.3, 0.3), (2.0, 0.5), (1e-4, 3e-4)] {
        let local = scalar_joint(1.0, s1);
        let (msg, report) = scalar_message(1.0, s2);
        let fused = fuse(&local, &[(&msg, &report)]).unwrap();
        let expected = 1.0 / (1.0 / s1 + 1.0 / s2);
        assert_relative_eq!(fused.p_u()[(0, 0)], expected, max_relative = 1e-12);
        if s1 == s2 {
            assert_relative_eq!(fused.p_u()[(0, 0)], s1 / 2.0, max_relative = 1e-12);
        }
        assert_relative_eq!(fused.cov[(0, 0)], 1.0, max_relative = 1e-12);
    }
}

#[test]
fn fusion_brings_neighbors_closer() {
    let (exp, areas) = two_area(&format!(r#""duration": 0.3, "seed": 8, {LOAD_STEPS}"#));
    let (_, streams) = exp.replicate(0).unwrap();
    for k in (1..300).step_by(23) {
        let rounds = exchange(&areas, &streams, k);
        let fused: Vec<JointEstimate> = (0..2)
            .map(|a| fuse(&rounds[a].0.joint, &[(&rounds[1 - a].0.messages[0], &rounds[a].1)]).unwrap())
            .collect();
        let (c0, c1) = (&rounds[0].1, &rounds[1].1);
        for (i, row0) in c0.local_rows.iter().enumerate() {
            let j = c1.coordinates.iter().position(|c| *c == c0.coordinates[i]).unwrap();
            if !(c0.accept[i] && c1.accept[j]) {
                continue;
            }
            let before = c0.difference[i];
            let after = (fused[0].u_hat[*row0] - fused[1].u_hat[c1.local_rows[j]]).abs();
            assert!(after <= before * (1.0 + 1e-9) + 1e-12, "step {k}: {after} > {before}");
        }
    }
}

#[test]
fn full_message_loss_is_isolated_local_estimation() {
    let (exp, mut areas) = two_area(&format!(r#""duration": 0.3, "seed": 4, {LOAD_STEPS}"#));
    let (_, streams) = exp.replicate(0).unwrap();
    let mut isolated: Vec<_> = areas.estimators.iter().map(|e| e.state.clone()).collect();
    let mut transport = LossyTransport::new(1.0, 0, 3);
    for k in 1..streams.z_x.len() {
        let meas = areas.measurements(&streams, k);
        let reports = run_round(&mut areas.estimators, &meas, &mut transport).unwrap();
        for (a, state) in isolated.iter_mut().enumerate() {
            let out = estimator::dsie_step(state, &meas[a].z_u_prev, &meas[a].z_x_now).unwrap();
            *state = out.state;
            assert_eq!(areas.estimators[a].state.x_hat, state.x_hat);
            assert_eq!(areas.estimators[a].state.p_x, state.p_x);
            assert_eq!(reports[a].fused, reports[a].local);
            assert_eq!(reports[a].transport_errors.len(), 1);
        }
    }
    assert_eq!(transport.dropped(), transport.sent());
}

#[test]
fn cross_check_accepts_consistent_neighbors() {
    let (exp, mut areas) = two_area(r#""duration": 10.0, "seed": 12"#);
    let (_, streams) = exp.replicate(0).unwrap();
    let mut transport = LossyTransport::lossless();
    let (mut accepted, mut total) = (0usize, 0usize);
    for k in 1..streams.z_x.len() {
        let meas = areas.measurements(&streams, k);
        for r in run_round(&mut areas.estimators, &meas, &mut transport).unwrap() {
            for c in &r.cross_checks {
                accepted += c.accepted();
                total += c.accept.len();
            }
        }
    }
    assert_eq!(total, 2 * 2 * (streams.z_x.len() - 1));
    let rate = accepted as f64 / total as f64;
    assert!(rate >= 0.99, "acceptance rate {rate:.4}");
}

#[test]
fn lossy_rounds_stay_bounded() {
    let fields = format!(r#""duration": 2.0, "seed": 6, {LOAD_STEPS}"#);
    let run = |drop: f64| {
        let (exp, mut areas) = two_area(&fields);
        let (truth, streams) = exp.replicate(0).unwrap();
        let mut transport = LossyTransport::new(drop, 0, 77);
        let mut errs = Vec::new();
        let mut all_pd = true;
        for k in 1..truth.len() {
            let meas = areas.measurements(&streams, k);
            run_round(&mut areas.estimators, &meas, &mut transport).unwrap();
            let mut se = 0.0;
            for (a, est) in areas.estimators.iter().enumerate() {
                let x_true = distributed::gather(&truth.x[k], &areas.x_idx[a]);
                let mags = distributed::gather(&exp.nominal.x_magnitude, &areas.x_idx[a]);
                se += (&est.state.x_hat - x_true).component_div(&mags).norm_squared();
                all_pd &= est.state.p_x.clone().cholesky().is_some();
            }
            errs.push(se);
        }
        (errs, all_pd)
    };
    let (lossless, pd0) = run(0.0);
    let (lossy, pd1) = run(0.2);
    assert!(pd0 && pd1);
    let max0 = lossless[50..].iter().cloned().fold(0.0, f64::max);
    let max1 = lossy[50..].iter().cloned().fold(0.0, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(max1 <= 10.0 * max0, "{max1} vs {max0}");
    assert!(mean(&lossy[50..]) >= mean(&lossless[50..]) * 0.9);
    assert!(mean(&lossy[50..]) <= 2.0 * mean(&lossless[50..]));
}

#[test]
fn single_area_partition_is_the_centralized_filter() {
    let exp = experiment("thirteen_bus.json", &format!(r#""duration": 0.2, "seed": 10, {LOAD_STEPS}"#));
    let mut areas = Areas::new(&exp, &Partition::single(&exp.filter_topology));
    assert_eq!(areas.estimators.len(), 1);
    let (_, streams) = exp.replicate(0).unwrap();
    let mut central = dsie_state(&exp);
    let mut transport = LossyTransport::lossless();
    for k in 1..streams.z_x.len() {
        let meas = areas.measurements(&streams, k);
        let r = run_round(&mut areas.estimators, &meas, &mut transport).unwrap();
        let out = estimator::dsie_step(&central, &streams.z_u[k - 1], &streams.z_x[k]).unwrap();
        central = out.state;
        let area = &areas.estimators[0].state;
        let x = distributed::gather(&central.x_hat, &areas.x_idx[0]);
        assert_eq!(area.x_hat, x, "step {k}");
        assert_eq!(r[0].bdd.distance.to_bits(), out.bdd.distance.to_bits());
    }
}

#[test]
fn lossy_rounds_are_reproducible() {
    let fields = format!(r#""duration": 0.3, "seed": 31, {LOAD_STEPS}, "noise": {{"process_fraction": 0.00075, "measurement_fraction": 0.001}}"#);
    let trace = || {
        let exp = experiment("thirteen_bus.json", &fields);
        let mut areas = Areas::new(&exp, &Partition::from_topology(&exp.filter_topology));
        let (_, streams) = exp.replicate(0).unwrap();
        let mut transport = LossyTransport::new(0.3, 2, 9);
        let mut xs = Vec::new();
        for k in 1..streams.z_x.len() {
            let meas = areas.measurements(&streams, k);
            run_round(&mut areas.estimators, &meas, &mut transport).unwrap();
            xs.extend(areas.estimators.iter().map(|e| e.state.x_hat.clone()));
        }
        (xs, transport.dropped())
    };
    assert_eq!(trace(), trace());
}
