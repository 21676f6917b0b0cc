#![allow(dead_code)]

use std::sync::Arc;

use dsie::distributed::{self, AreaEstimator, AreaMeasurement};
use dsie::estimator::{self, DsieContext, FilterState, StepOutput, TseReport, TseState};
use dsie::model::{self, DiscreteModel, NetworkTopology, Partition};
use dsie::sim::{Experiment, MeasurementStreams, Scenario};
use dsie::{Mat, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn fixture(name: &str) -> NetworkTopology {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    NetworkTopology::from_json_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Scenario from the JSON fields after `network`, e.g. `"duration": 1.0`.
pub fn scenario(network: &str, fields: &str) -> Scenario {
    Scenario::from_json_str(&format!(r#"{{"network": "{network}", {fields}}}"#)).unwrap()
}

pub fn experiment(network: &str, fields: &str) -> Experiment {
    Experiment::new(scenario(network, fields), fixture(network)).unwrap()
}

pub fn dsie_state(exp: &Experiment) -> FilterState {
    let ctx = Arc::new(DsieContext::new(exp.filter_model.clone(), exp.scenario.detection.bdd_config()).unwrap());
    let (x0, p0) = exp.initial_estimate();
    FilterState::new(ctx, x0, p0).unwrap()
}

/// Runs the joint filter over `streams`, calling `visit(k, output)` for
/// `k = 1..len`. Returns the final state.
pub fn run_dsie(state: FilterState, streams: &MeasurementStreams, mut visit: impl FnMut(usize, &StepOutput)) -> FilterState {
    let mut state = state;
    for k in 1..streams.z_x.len() {
        let out = estimator::dsie_step(&state, &streams.z_u[k - 1], &streams.z_x[k]).unwrap();
        visit(k, &out);
        state = out.state;
    }
    state
}

pub fn tse_state(exp: &Experiment) -> TseState {
    let (s0, p0, q) = exp.tracking_setup();
    TseState::new(Arc::new(exp.filter_model.clone()), s0, p0, q, exp.scenario.detection.threshold()).unwrap()
}

pub fn run_tse(state: TseState, streams: &MeasurementStreams, mut visit: impl FnMut(usize, &TseState, &TseReport)) {
    let mut state = state;
    for k in 0..streams.z_x.len() {
        let (next, report) = estimator::tse_step(&state, &streams.z_x[k], &streams.z_u[k]).unwrap();
        visit(k, &next, &report);
        state = next;
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn noise(rng: &mut ChaCha8Rng, std: &Vector) -> Vector {
    std.map(|s| s * rng.sample::<f64, _>(StandardNormal))
}

/// Stable random model: `A_d` is a rotation scaled to spectral radius
/// `radius`, `C = [I; G]` with `p - n` random extra rows, `D = I`.
pub fn random_model(seed: u64, n: usize, m: usize, p: usize, radius: f64) -> DiscreteModel {
    assert!(p >= n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_d = gaussian(&mut rng, n, n).qr().q() * radius;
    let b_d = gaussian(&mut rng, n, m) * 0.5;
    let mut c = Mat::zeros(p, n);
    c.view_mut((0, 0), (n, n)).fill_with_identity();
    if p > n {
        c.view_mut((n, 0), (p - n, n)).copy_from(&gaussian(&mut rng, p - n, n));
    }
    DiscreteModel::from_matrices(
        a_d,
        b_d,
        c,
        Mat::identity(m, m),
        Mat::identity(n, n) * 1e-4,
        Mat::identity(p, p) * 1e-2,
        Mat::identity(m, m) * 1e-2,
        1e-3,
    )
    .unwrap()
}

/// Simulates `model` under `inputs` with its own `Q`, `R_x`, `R_u` as noise.
/// Returns `(x, z_x, z_u)`; `z_u[k]` measures `inputs[k]`.
pub fn simulate(
    model: &DiscreteModel,
    x0: &Vector,
    inputs: &[Vector],
    seed: u64,
    noisy: bool,
) -> (Vec<Vector>, MeasurementStreams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if noisy { 1.0 } else { 0.0 };
    let sq = |m: &Mat| m.diagonal().map(|v| scale * v.sqrt());
    let (q, rx, ru) = (sq(&model.q), sq(&model.r_x), sq(&model.r_u));
    let mut x = vec![x0.clone()];
    for k in 1..inputs.len() {
        let next = &model.a_d * &x[k - 1] + &model.b_d * &inputs[k - 1] + noise(&mut rng, &q);
        x.push(next);
    }
    let z_x = x.iter().map(|x| &model.c * x + noise(&mut rng, &rx)).collect();
    let z_u = inputs.iter().map(|u| &model.d * u + noise(&mut rng, &ru)).collect();
    (x, MeasurementStreams { z_x, z_u })
}

pub fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Area filters of an experiment plus index maps from global vectors.
pub struct Areas {
    pub estimators: Vec<AreaEstimator>,
    pub models: Vec<model::AreaModel>,
    pub x_idx: Vec<Vec<usize>>,
    pub u_idx: Vec<Vec<usize>>,
    pub z_x_idx: Vec<Vec<usize>>,
    pub z_u_idx: Vec<Vec<usize>>,
}

impl Areas {
    pub fn new(exp: &Experiment, part: &Partition) -> Self {
        let models = model::partition(&exp.filter_topology, part, exp.scenario.ts, &exp.filter_process).unwrap();
        let g = &exp.filter_model;
        let (x0, p0) = exp.initial_estimate();
        let idx = |global: Vec<String>, local: Vec<String>| distributed::channel_indices(&global, &local).unwrap();
        let mut areas = Areas {
            estimators: vec![],
            models: vec![],
            x_idx: vec![],
            u_idx: vec![],
            z_x_idx: vec![],
            z_u_idx: vec![],
        };
        for am in models {
            let m = &am.model;
            let xi = idx(g.state_coordinates(), m.state_coordinates());
            areas.u_idx.push(idx(g.input_coordinates(), m.input_coordinates()));
            areas.z_x_idx.push(idx(g.state_channel_coordinates(), m.state_channel_coordinates()));
            areas.z_u_idx.push(idx(g.input_channel_coordinates(), m.input_channel_coordinates()));
            let ctx = Arc::new(DsieContext::new(m.clone(), exp.scenario.detection.bdd_config()).unwrap());
            let p = Mat::from_fn(xi.len(), xi.len(), |i, j| p0[(xi[i], xi[j])]);
            let state = FilterState::new(ctx, distributed::gather(&x0, &xi), p).unwrap();
            areas
                .estimators
                .push(AreaEstimator::new(am.area_id.clone(), state, am.shared.clone()));
            areas.x_idx.push(xi);
            areas.models.push(am);
        }
        areas
    }

    /// Per-area slices of the global measurements for round `k >= 1`.
    pub fn measurements(&self, streams: &MeasurementStreams, k: usize) -> Vec<AreaMeasurement> {
        (0..self.estimators.len())
            .map(|a| AreaMeasurement {
                z_u_prev: distributed::gather(&streams.z_u[k - 1], &self.z_u_idx[a]),
                z_x_now: distributed::gather(&streams.z_x[k], &self.z_x_idx[a]),
            })
            .collect()
    }
}
