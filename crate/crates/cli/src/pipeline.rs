//! Runs the estimators over one simulated replicate.
//!
//! All series are indexed by time step `k`. The joint filters estimate
//! `u_{k-1}` at step `k`, so their input series is filled one slot behind
//! the state series; the baselines fill both at `k`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use dsie::distributed::{self, AreaEstimator, AreaMeasurement, LossyTransport};
use dsie::estimator::{self, DsieContext, FilterState, TseState};
use dsie::model::{self, Partition};
use dsie::numerics;
use dsie::sim::{self, Experiment, MeasurementStreams, Method, PartitionChoice, Purpose, TruthTrajectory};
use dsie::{Mat, Vector};
use serde::{Deserialize, Serialize};

/// Label of the distance series produced by a centralized method.
pub const CENTRAL: &str = "all";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Check every posterior covariance for symmetric PSD.
    pub check_psd: bool,
}

/// A cross-check rejection in a distributed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub step: usize,
    pub area: String,
    pub sender: String,
    pub coordinate: String,
    pub difference: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub method: Method,
    pub x: Vec<Option<Vector>>,
    pub u: Vec<Option<Vector>>,
    /// Distance series by label (`all`, or area id for the distributed filter).
    pub distance: BTreeMap<String, Vec<Option<f64>>>,
    pub threshold: BTreeMap<String, f64>,
    /// Steps where any detector fired.
    pub alarms: Vec<usize>,
    pub rejections: Vec<Rejection>,
    pub transport_errors: usize,
    /// Steps whose covariance failed the PSD check (0 unless requested).
    pub psd_violations: usize,
    pub elapsed_ms: f64,
}

impl MethodOutput {
    fn new(method: Method, len: usize) -> Self {
        Self {
            method,
            x: vec![None; len],
            u: vec![None; len],
            distance: BTreeMap::new(),
            threshold: BTreeMap::new(),
            alarms: Vec::new(),
            rejections: Vec::new(),
            transport_errors: 0,
            psd_violations: 0,
            elapsed_ms: 0.0,
        }
    }
}

pub fn run_method(
    exp: &Experiment,
    method: Method,
    truth: &TruthTrajectory,
    streams: &MeasurementStreams,
    replicate: u64,
    opts: RunOptions,
) -> Result<MethodOutput> {
    let start = Instant::now();
    let mut out = match method {
        Method::Dsie => run_dsie(exp, streams, opts),
        Method::Wls => run_wls(exp, streams),
        Method::Tse => run_tse(exp, streams, opts),
        Method::DistributedDsie => run_distributed(exp, streams, replicate, opts),
    }
    .with_context(|| format!("method `{}`", method.name()))?;
    debug_assert_eq!(out.x.len(), truth.len());
    out.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

pub fn dsie_initial_state(exp: &Experiment) -> Result<FilterState> {
    let ctx = Arc::new(DsieContext::new(exp.filter_model.clone(), exp.scenario.detection.bdd_config())?);
    let (x0, p0) = exp.initial_estimate();
    Ok(FilterState::new(ctx, x0, p0)?)
}

fn run_dsie(exp: &Experiment, streams: &MeasurementStreams, opts: RunOptions) -> Result<MethodOutput> {
    let len = streams.z_x.len();
    let mut out = MethodOutput::new(Method::Dsie, len);
    let mut state = dsie_initial_state(exp)?;
    out.threshold.insert(CENTRAL.into(), state.ctx.threshold());
    let mut dist = vec![None; len];
    if len > 0 {
        out.x[0] = Some(state.x_hat.clone());
    }
    for k in 1..len {
        let step = estimator::dsie_step(&state, &streams.z_u[k - 1], &streams.z_x[k])
            .with_context(|| format!("step {k}"))?;
        dist[k] = Some(step.bdd.distance);
        if step.bdd.flagged {
            out.alarms.push(k);
        }
        out.u[k - 1] = Some(step.joint.u_hat.clone());
        state = step.state;
        if opts.check_psd && !numerics::is_symmetric_psd(&state.p_x) {
            out.psd_violations += 1;
        }
        out.x[k] = Some(state.x_hat.clone());
    }
    out.distance.insert(CENTRAL.into(), dist);
    Ok(out)
}

fn run_wls(exp: &Experiment, streams: &MeasurementStreams) -> Result<MethodOutput> {
    let len = streams.z_x.len();
    let mut out = MethodOutput::new(Method::Wls, len);
    let threshold = exp.scenario.detection.threshold();
    let mut dist = vec![None; len];
    for k in 0..len {
        let snap = estimator::wls_snapshot(&streams.z_x[k], &streams.z_u[k], &exp.filter_model, threshold)
            .with_context(|| format!("step {k}"))?;
        out.threshold.entry(CENTRAL.into()).or_insert(snap.bdd.threshold);
        dist[k] = Some(snap.bdd.distance);
        if snap.bdd.flagged {
            out.alarms.push(k);
        }
        out.x[k] = Some(snap.x_hat);
        out.u[k] = Some(snap.u_hat);
    }
    out.distance.insert(CENTRAL.into(), dist);
    Ok(out)
}

fn run_tse(exp: &Experiment, streams: &MeasurementStreams, opts: RunOptions) -> Result<MethodOutput> {
    let len = streams.z_x.len();
    let mut out = MethodOutput::new(Method::Tse, len);
    let (s0, p0, q) = exp.tracking_setup();
    let mut state = TseState::new(
        Arc::new(exp.filter_model.clone()),
        s0,
        p0,
        q,
        exp.scenario.detection.threshold(),
    )?;
    out.threshold.insert(CENTRAL.into(), state.threshold);
    let mut dist = vec![None; len];
    for k in 0..len {
        let (next, report) =
            estimator::tse_step(&state, &streams.z_x[k], &streams.z_u[k]).with_context(|| format!("step {k}"))?;
        state = next;
        dist[k] = Some(report.distance);
        if report.flagged {
            out.alarms.push(k);
        }
        if opts.check_psd && !numerics::is_symmetric_psd(&state.p) {
            out.psd_violations += 1;
        }
        out.x[k] = Some(state.x_hat());
        out.u[k] = Some(state.u_hat());
    }
    out.distance.insert(CENTRAL.into(), dist);
    Ok(out)
}

/// Area filters plus the index maps between area and global vectors.
pub struct DistributedSetup {
    pub areas: Vec<AreaEstimator>,
    pub z_x_idx: Vec<Vec<usize>>,
    pub z_u_idx: Vec<Vec<usize>>,
    pub x_idx: Vec<Vec<usize>>,
    pub u_idx: Vec<Vec<usize>>,
}

pub fn distributed_setup(exp: &Experiment) -> Result<DistributedSetup> {
    let part = match exp.scenario.partition {
        PartitionChoice::Network => Partition::from_topology(&exp.filter_topology),
        PartitionChoice::Single => Partition::single(&exp.filter_topology),
    };
    let area_models = model::partition(&exp.filter_topology, &part, exp.scenario.ts, &exp.filter_process)?;
    let global = &exp.filter_model;
    let (x0, p0) = exp.initial_estimate();
    let bdd = exp.scenario.detection.bdd_config();
    let index = |global: &[String], local: &[String], what: &str, area: &str| {
        distributed::channel_indices(global, local).ok_or_else(|| anyhow!("area `{area}`: {what} not found globally"))
    };

    let mut setup = DistributedSetup {
        areas: Vec::new(),
        z_x_idx: Vec::new(),
        z_u_idx: Vec::new(),
        x_idx: Vec::new(),
        u_idx: Vec::new(),
    };
    for am in area_models {
        let m = &am.model;
        let xi = index(&global.state_coordinates(), &m.state_coordinates(), "states", &am.area_id)?;
        let ui = index(&global.input_coordinates(), &m.input_coordinates(), "inputs", &am.area_id)?;
        let zxi = index(
            &global.state_channel_coordinates(),
            &m.state_channel_coordinates(),
            "state channels",
            &am.area_id,
        )?;
        let zui = index(
            &global.input_channel_coordinates(),
            &m.input_channel_coordinates(),
            "input channels",
            &am.area_id,
        )?;
        let ctx = Arc::new(DsieContext::new(m.clone(), bdd)?);
        let x0_area = distributed::gather(&x0, &xi);
        let p0_area = Mat::from_fn(xi.len(), xi.len(), |i, j| p0[(xi[i], xi[j])]);
        let state = FilterState::new(ctx, x0_area, p0_area)?;
        let mut est = AreaEstimator::new(am.area_id.clone(), state, am.shared.clone());
        est.kappa = exp.scenario.detection.kappa;
        setup.areas.push(est);
        setup.x_idx.push(xi);
        setup.u_idx.push(ui);
        setup.z_x_idx.push(zxi);
        setup.z_u_idx.push(zui);
    }
    Ok(setup)
}

fn run_distributed(exp: &Experiment, streams: &MeasurementStreams, replicate: u64, opts: RunOptions) -> Result<MethodOutput> {
    let len = streams.z_x.len();
    let mut out = MethodOutput::new(Method::DistributedDsie, len);
    let DistributedSetup {
        mut areas,
        z_x_idx,
        z_u_idx,
        x_idx,
        u_idx,
    } = distributed_setup(exp)?;
    let t = &exp.scenario.transport;
    let mut transport = LossyTransport::new(
        t.drop_probability,
        t.max_delay,
        sim::derived_seed(exp.scenario.seed, replicate, Purpose::Transport),
    );
    let (n, m) = (exp.filter_model.n(), exp.filter_model.m());
    let mut dist: Vec<Vec<Option<f64>>> = vec![vec![None; len]; areas.len()];
    for a in &areas {
        out.threshold.insert(a.area_id.clone(), a.state.ctx.threshold());
    }

    let assemble = |parts: &[(&Vec<usize>, &Vector)], dim: usize| {
        // first area in id order wins on shared coordinates
        let mut v = Vector::zeros(dim);
        let mut set = vec![false; dim];
        for (idx, local) in parts {
            for (i, &g) in idx.iter().enumerate() {
                if !set[g] {
                    v[g] = local[i];
                    set[g] = true;
                }
            }
        }
        v
    };
    if len > 0 {
        let parts: Vec<_> = x_idx.iter().zip(areas.iter().map(|a| &a.state.x_hat)).collect();
        out.x[0] = Some(assemble(&parts, n));
    }

    for k in 1..len {
        let meas: Vec<AreaMeasurement> = (0..areas.len())
            .map(|a| AreaMeasurement {
                z_u_prev: distributed::gather(&streams.z_u[k - 1], &z_u_idx[a]),
                z_x_now: distributed::gather(&streams.z_x[k], &z_x_idx[a]),
            })
            .collect();
        let reports =
            distributed::run_round(&mut areas, &meas, &mut transport).with_context(|| format!("round {k}"))?;
        let mut alarm = false;
        for (a, r) in reports.iter().enumerate() {
            dist[a][k] = Some(r.bdd.distance);
            alarm |= r.bdd.flagged;
            out.transport_errors += r.transport_errors.len();
            for check in &r.cross_checks {
                for (c, ok) in check.accept.iter().enumerate() {
                    if !ok {
                        out.rejections.push(Rejection {
                            step: k,
                            area: r.area_id.clone(),
                            sender: check.sender.clone(),
                            coordinate: check.coordinates[c].clone(),
                            difference: check.difference[c],
                            bound: check.bound[c],
                        });
                    }
                }
            }
        }
        if alarm {
            out.alarms.push(k);
        }
        if opts.check_psd {
            out.psd_violations += areas
                .iter()
                .filter(|a| !numerics::is_symmetric_psd(&a.state.p_x))
                .count();
        }
        let xs: Vec<_> = x_idx.iter().zip(areas.iter().map(|a| &a.state.x_hat)).collect();
        out.x[k] = Some(assemble(&xs, n));
        let us: Vec<_> = u_idx.iter().zip(reports.iter().map(|r| &r.fused.u_hat)).collect();
        out.u[k - 1] = Some(assemble(&us, m));
    }
    for (a, series) in areas.iter().zip(dist) {
        out.distance.insert(a.area_id.clone(), series);
    }
    Ok(out)
}
