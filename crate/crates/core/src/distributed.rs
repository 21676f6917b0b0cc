//! Multi-area estimation with shared-input exchange.
//!
//! Every round runs in lockstep:
//!
//! 1. each area solves its local joint estimate and publishes the marginal
//!    estimate of every input coordinate it shares with a neighbor;
//! 2. the transport delivers (or drops, or delays) the messages;
//! 3. each area gates incoming coordinates against its own estimate,
//!    fuses the accepted ones by a stacked WLS and finishes the step with
//!    the usual predict/update.
//!
//! Cross-area correlations are not transmitted; fusion weights are
//! block-diagonal. A coordinate shared by three or more areas is fused
//! jointly against all accepted neighbors in one solve.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{self, BddReport, EstimatorError, FilterState, JointEstimate, StepOutput};
use crate::model::SelectionMap;
use crate::numerics;
use crate::{Mat, Vector};

/// Wire format version of [`ShareMessage`].
pub const SHARE_MESSAGE_VERSION: u32 = 1;

/// Default cross-check gate in standard deviations.
pub const DEFAULT_KAPPA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributedError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("area `{area}`: coordinate `{coordinate}` from `{sender}` is not shared with it")]
    CoordinateMismatch {
        area: String,
        sender: String,
        coordinate: String,
    },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("{expected} measurement sets expected, got {got}")]
    MeasurementCount { expected: usize, got: usize },
}

impl From<numerics::NumericsError> for DistributedError {
    fn from(e: numerics::NumericsError) -> Self {
        DistributedError::Estimator(e.into())
    }
}

/// Per-message delivery problems; recorded, never fatal.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
pub enum TransportError {
    #[error("no message from `{neighbor}` for step {step}")]
    Missing { neighbor: String, step: u64 },
    #[error("stale message from `{neighbor}`: sent for step {sent}, now {step}")]
    Stale { neighbor: String, sent: u64, step: u64 },
    #[error("rejected message from `{neighbor}`: {reason}")]
    Rejected { neighbor: String, reason: String },
}

/// Marginal input estimate shared with one neighbor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareMessage {
    pub version: u32,
    pub sender: String,
    pub receiver: String,
    /// Time index of the estimate (`k-1`).
    pub step: u64,
    pub coordinates: Vec<String>,
    pub u_hat: Vec<f64>,
    /// Row-major marginal covariance over `coordinates`.
    pub p_u: Vec<Vec<f64>>,
    /// Local bad-data flag of the sender, per coordinate.
    pub flagged: Vec<bool>,
}

impl ShareMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DistributedError> {
        let msg: ShareMessage =
            serde_json::from_str(text).map_err(|e| DistributedError::Malformed(e.to_string()))?;
        msg.check()?;
        Ok(msg)
    }

    fn check(&self) -> Result<(), DistributedError> {
        let k = self.coordinates.len();
        if self.version != SHARE_MESSAGE_VERSION {
            return Err(DistributedError::Malformed(format!("unsupported version {}", self.version)));
        }
        if self.u_hat.len() != k || self.flagged.len() != k || self.p_u.len() != k || self.p_u.iter().any(|r| r.len() != k) {
            return Err(DistributedError::Malformed("inconsistent lengths".into()));
        }
        if self.u_hat.iter().chain(self.p_u.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(DistributedError::Malformed("non-finite value".into()));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Mat {
        let k = self.coordinates.len();
        Mat::from_fn(k, k, |i, j| self.p_u[i][j])
    }
}

/// Result of gating a neighbor's shared estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossCheckReport {
    pub sender: String,
    pub coordinates: Vec<String>,
    /// Local input rows the coordinates map to.
    pub local_rows: Vec<usize>,
    /// `|û_local − û_neighbor|`.
    pub difference: Vec<f64>,
    /// `κ·sqrt(P_local + P_neighbor)`.
    pub bound: Vec<f64>,
    pub accept: Vec<bool>,
    pub kappa: f64,
}

impl CrossCheckReport {
    pub fn accepted(&self) -> usize {
        self.accept.iter().filter(|a| **a).count()
    }
}

/// One area's filter plus its neighbor table.
#[derive(Debug, Clone)]
pub struct AreaEstimator {
    pub area_id: String,
    pub state: FilterState,
    pub neighbors: BTreeMap<String, SelectionMap>,
    pub kappa: f64,
}

impl AreaEstimator {
    pub fn new(area_id: impl Into<String>, state: FilterState, neighbors: BTreeMap<String, SelectionMap>) -> Self {
        Self {
            area_id: area_id.into(),
            state,
            neighbors,
            kappa: DEFAULT_KAPPA,
        }
    }
}

/// Output of the local phase.
#[derive(Debug, Clone)]
pub struct LocalOutput {
    pub joint: JointEstimate,
    pub bdd: BddReport,
    pub messages: Vec<ShareMessage>,
}

/// Local joint estimate and one outgoing message per neighbor.
pub fn local_phase(est: &AreaEstimator, z_u_prev: &Vector, z_x_now: &Vector) -> Result<LocalOutput, DistributedError> {
    let (joint, bdd) = estimator::estimate_input(&est.state, z_u_prev, z_x_now)?;
    let n = joint.x_hat.len();
    let messages = est
        .neighbors
        .iter()
        .map(|(neighbor, map)| {
            let rows: Vec<usize> = map.pairs.iter().map(|(local, _)| *local).collect();
            ShareMessage {
                version: SHARE_MESSAGE_VERSION,
                sender: est.area_id.clone(),
                receiver: neighbor.clone(),
                step: joint.step,
                coordinates: map.coordinates.clone(),
                u_hat: rows.iter().map(|&r| joint.u_hat[r]).collect(),
                p_u: rows
                    .iter()
                    .map(|&a| rows.iter().map(|&b| joint.cov[(n + a, n + b)]).collect())
                    .collect(),
                flagged: vec![bdd.flagged; rows.len()],
            }
        })
        .collect();
    Ok(LocalOutput { joint, bdd, messages })
}

/// Gates each coordinate of `msg` against the local estimate.
pub fn cross_check(
    area_id: &str,
    local: &JointEstimate,
    msg: &ShareMessage,
    map: &SelectionMap,
    kappa: f64,
) -> Result<CrossCheckReport, DistributedError> {
    msg.check()?;
    let n = local.x_hat.len();
    let mut report = CrossCheckReport {
        sender: msg.sender.clone(),
        coordinates: msg.coordinates.clone(),
        local_rows: Vec::with_capacity(msg.coordinates.len()),
        difference: Vec::with_capacity(msg.coordinates.len()),
        bound: Vec::with_capacity(msg.coordinates.len()),
        accept: Vec::with_capacity(msg.coordinates.len()),
        kappa,
    };
    for (c, name) in msg.coordinates.iter().enumerate() {
        let pos = map
            .coordinates
            .iter()
            .position(|x| x == name)
            .ok_or_else(|| DistributedError::CoordinateMismatch {
                area: area_id.to_string(),
                sender: msg.sender.clone(),
                coordinate: name.clone(),
            })?;
        let row = map.pairs[pos].0;
        let diff = (local.u_hat[row] - msg.u_hat[c]).abs();
        let var = local.cov[(n + row, n + row)].max(0.0) + msg.p_u[c][c].max(0.0);
        let bound = kappa * var.sqrt();
        report.local_rows.push(row);
        report.difference.push(diff);
        report.bound.push(bound);
        report.accept.push(diff <= bound);
    }
    Ok(report)
}

/// Stacked WLS of the local joint estimate with accepted neighbor
/// coordinates treated as extra direct input measurements.
pub fn fuse(local: &JointEstimate, accepted: &[(&ShareMessage, &CrossCheckReport)]) -> Result<JointEstimate, DistributedError> {
    let n = local.x_hat.len();
    let dim = local.cov.nrows();

    let mut rows = Vec::new();
    let mut values = Vec::new();
    let mut blocks = Vec::new();
    for (msg, report) in accepted {
        let keep: Vec<usize> = (0..report.accept.len()).filter(|&c| report.accept[c]).collect();
        if keep.is_empty() {
            continue;
        }
        for &c in &keep {
            rows.push(n + report.local_rows[c]);
            values.push(msg.u_hat[c]);
        }
        blocks.push(Mat::from_fn(keep.len(), keep.len(), |i, j| msg.p_u[keep[i]][keep[j]]));
    }
    if rows.is_empty() {
        return Ok(local.clone());
    }

    let extra = rows.len();
    let mut design = Mat::zeros(dim + extra, dim);
    design.view_mut((0, 0), (dim, dim)).fill_with_identity();
    for (r, &col) in rows.iter().enumerate() {
        design[(dim + r, col)] = 1.0;
    }
    let mut weight_blocks: Vec<&Mat> = vec![&local.cov];
    weight_blocks.extend(blocks.iter());
    let weight = numerics::block_diag(&weight_blocks);
    let observation = numerics::vstack(&[&local.stacked(), &Vector::from_vec(values)]);

    let sol = numerics::wls_solve(&design, &weight, &observation)?;
    Ok(JointEstimate::from_stacked(
        &sol.estimate,
        numerics::symmetrize_psd(&sol.covariance),
        n,
        local.step,
    ))
}

/// Predict and update from the fused estimate.
pub fn finalize_phase(est: &AreaEstimator, fused: JointEstimate, bdd: BddReport, z_x_now: &Vector) -> Result<StepOutput, DistributedError> {
    Ok(estimator::finish_step(&est.state, fused, bdd, z_x_now)?)
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

/// In-process message channel between areas.
pub trait Transport {
    fn send(&mut self, msg: ShareMessage);
    /// Messages for `receiver` that are due by `step`.
    fn receive(&mut self, receiver: &str, step: u64) -> Vec<ShareMessage>;
}

/// Queue with seeded random drops and delays. The default is lossless.
#[derive(Debug, Clone)]
pub struct LossyTransport {
    pub drop_probability: f64,
    /// Delay drawn uniformly from `0..=max_delay` steps.
    pub max_delay: u64,
    rng: ChaCha8Rng,
    in_flight: Vec<(u64, ShareMessage)>,
    dropped: u64,
    sent: u64,
}

impl LossyTransport {
    pub fn new(drop_probability: f64, max_delay: u64, seed: u64) -> Self {
        Self {
            drop_probability: drop_probability.clamp(0.0, 1.0),
            max_delay,
            rng: ChaCha8Rng::seed_from_u64(seed),
            in_flight: Vec::new(),
            dropped: 0,
            sent: 0,
        }
    }

    pub fn lossless() -> Self {
        Self::new(0.0, 0, 0)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }
}

impl Default for LossyTransport {
    fn default() -> Self {
        Self::lossless()
    }
}

impl Transport for LossyTransport {
    fn send(&mut self, msg: ShareMessage) {
        self.sent += 1;
        if self.drop_probability > 0.0 && self.rng.random::<f64>() < self.drop_probability {
            self.dropped += 1;
            return;
        }
        let delay = if self.max_delay > 0 {
            self.rng.random_range(0..=self.max_delay)
        } else {
            0
        };
        self.in_flight.push((msg.step + delay, msg));
    }

    fn receive(&mut self, receiver: &str, step: u64) -> Vec<ShareMessage> {
        let mut out = Vec::new();
        let mut kept = Vec::with_capacity(self.in_flight.len());
        for (due, msg) in self.in_flight.drain(..) {
            if msg.receiver == receiver && due <= step {
                out.push(msg);
            } else {
                kept.push((due, msg));
            }
        }
        self.in_flight = kept;
        out
    }
}

// ---------------------------------------------------------------------------
// Rounds
// ---------------------------------------------------------------------------

/// Measurements of one area for one round.
#[derive(Debug, Clone)]
pub struct AreaMeasurement {
    pub z_u_prev: Vector,
    pub z_x_now: Vector,
}

/// Everything one area produced in a round.
#[derive(Debug, Clone)]
pub struct AreaRoundReport {
    pub area_id: String,
    pub local: JointEstimate,
    pub fused: JointEstimate,
    pub bdd: BddReport,
    pub cross_checks: Vec<CrossCheckReport>,
    pub transport_errors: Vec<TransportError>,
}

/// One synchronous round over all areas; area states advance in place.
pub fn run_round(
    areas: &mut [AreaEstimator],
    measurements: &[AreaMeasurement],
    transport: &mut dyn Transport,
) -> Result<Vec<AreaRoundReport>, DistributedError> {
    if areas.len() != measurements.len() {
        return Err(DistributedError::MeasurementCount {
            expected: areas.len(),
            got: measurements.len(),
        });
    }
    let locals: Vec<LocalOutput> = areas
        .par_iter()
        .zip(measurements.par_iter())
        .map(|(est, z)| local_phase(est, &z.z_u_prev, &z.z_x_now))
        .collect::<Result<_, _>>()?;

    for out in &locals {
        for msg in &out.messages {
            transport.send(msg.clone());
        }
    }
    let inboxes: Vec<Vec<ShareMessage>> = areas
        .iter()
        .zip(&locals)
        .map(|(est, out)| transport.receive(&est.area_id, out.joint.step))
        .collect();

    let results: Vec<(StepOutput, AreaRoundReport)> = areas
        .par_iter()
        .zip(locals.into_par_iter())
        .zip(inboxes.into_par_iter())
        .zip(measurements.par_iter())
        .map(|(((est, local), inbox), z)| fuse_and_finish(est, local, inbox, &z.z_x_now))
        .collect::<Result<_, _>>()?;

    let mut reports = Vec::with_capacity(results.len());
    for (est, (out, report)) in areas.iter_mut().zip(results) {
        est.state = out.state;
        reports.push(report);
    }
    Ok(reports)
}

fn fuse_and_finish(
    est: &AreaEstimator,
    local: LocalOutput,
    inbox: Vec<ShareMessage>,
    z_x_now: &Vector,
) -> Result<(StepOutput, AreaRoundReport), DistributedError> {
    let step = local.joint.step;
    let mut errors = Vec::new();
    let mut current: BTreeMap<&str, ShareMessage> = BTreeMap::new();
    for msg in inbox {
        if msg.step != step {
            errors.push(TransportError::Stale {
                neighbor: msg.sender.clone(),
                sent: msg.step,
                step,
            });
        } else if !est.neighbors.contains_key(&msg.sender) {
            errors.push(TransportError::Rejected {
                neighbor: msg.sender.clone(),
                reason: "sender is not a neighbor".into(),
            });
        } else if let Some((key, _)) = est.neighbors.get_key_value(&msg.sender) {
            current.insert(key.as_str(), msg);
        }
    }

    let mut checks = Vec::new();
    let mut accepted_msgs = Vec::new();
    for (neighbor, map) in &est.neighbors {
        let Some(msg) = current.remove(neighbor.as_str()) else {
            errors.push(TransportError::Missing {
                neighbor: neighbor.clone(),
                step,
            });
            continue;
        };
        match cross_check(&est.area_id, &local.joint, &msg, map, est.kappa) {
            Ok(report) => {
                checks.push(report);
                accepted_msgs.push(msg);
            }
            Err(e) => errors.push(TransportError::Rejected {
                neighbor: neighbor.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let pairs: Vec<(&ShareMessage, &CrossCheckReport)> = accepted_msgs.iter().zip(checks.iter()).collect();
    let fused = fuse(&local.joint, &pairs)?;
    let out = finalize_phase(est, fused.clone(), local.bdd.clone(), z_x_now)?;
    let report = AreaRoundReport {
        area_id: est.area_id.clone(),
        local: local.joint,
        fused,
        bdd: local.bdd,
        cross_checks: checks,
        transport_errors: errors,
    };
    Ok((out, report))
}

/// Positions of `local` names inside `global`, for slicing global
/// measurement or truth vectors down to one area.
pub fn channel_indices(global: &[String], local: &[String]) -> Option<Vec<usize>> {
    let pos: BTreeMap<&str, usize> = global.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    local.iter().map(|s| pos.get(s.as_str()).copied()).collect()
}

/// `v[idx]`.
pub fn gather(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{BddConfig, DsieContext};
    use crate::model::DiscreteModel;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use std::sync::Arc;

    fn joint(u: f64, var_u: f64) -> JointEstimate {
        JointEstimate::from_stacked(&dvector![1.0, u], dmatrix![0.5, 0.0; 0.0, var_u], 1, 7)
    }

    fn map() -> SelectionMap {
        SelectionMap {
            pairs: vec![(0, 0)],
            coordinates: vec!["v:b3.d".into()],
        }
    }

    fn message(u: f64, var: f64) -> ShareMessage {
        ShareMessage {
            version: SHARE_MESSAGE_VERSION,
            sender: "B".into(),
            receiver: "A".into(),
            step: 7,
            coordinates: vec!["v:b3.d".into()],
            u_hat: vec![u],
            p_u: vec![vec![var]],
            flagged: vec![false],
        }
    }

    #[test]
    fn identical_estimates_accepted() {
        let r = cross_check("A", &joint(2.0, 0.1), &message(2.0, 0.1), &map(), 3.0).unwrap();
        assert_eq!(r.difference, vec![0.0]);
        assert_eq!(r.accept, vec![true]);
    }

    #[test]
    fn large_offset_rejected() {
        let offset = 10.0 * (0.2f64).sqrt();
        let r = cross_check("A", &joint(2.0, 0.1), &message(2.0 + offset, 0.1), &map(), 3.0).unwrap();
        assert_eq!(r.accept, vec![false]);
    }

    #[test]
    fn unknown_coordinate_is_mismatch() {
        let mut msg = message(2.0, 0.1);
        msg.coordinates = vec!["v:b9.q".into()];
        let err = cross_check("A", &joint(2.0, 0.1), &msg, &map(), 3.0).unwrap_err();
        assert!(matches!(err, DistributedError::CoordinateMismatch { .. }));
    }

    #[test]
    fn fusion_without_messages_is_identity() {
        let j = joint(2.0, 0.1);
        assert_eq!(fuse(&j, &[]).unwrap(), j);
    }

    #[test]
    fn equal_variance_fusion_halves_variance() {
        let j = joint(2.0, 0.3);
        let msg = message(2.0, 0.3);
        let report = cross_check("A", &j, &msg, &map(), 3.0).unwrap();
        let fused = fuse(&j, &[(&msg, &report)]).unwrap();
        assert_relative_eq!(fused.p_u()[(0, 0)], 0.15, epsilon = 1e-12);
        assert_relative_eq!(fused.u_hat[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(fused.p_x()[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn message_json_round_trip() {
        let msg = message(1.0 / 3.0, 0.1);
        let back = ShareMessage::from_json(&msg.to_json()).unwrap();
        assert_eq!(back, msg);
        let bad = msg.to_json().replace("\"version\":1", "\"version\":9");
        assert!(ShareMessage::from_json(&bad).is_err());
    }

    #[test]
    fn transport_drops_and_delays() {
        let mut t = LossyTransport::new(1.0, 0, 1);
        t.send(message(1.0, 1.0));
        assert!(t.receive("A", 7).is_empty());
        assert_eq!(t.dropped(), 1);

        let mut t = LossyTransport::new(0.0, 3, 2);
        for _ in 0..20 {
            t.send(message(1.0, 1.0));
        }
        let now = t.receive("A", 7).len();
        let later = t.receive("A", 10).len();
        assert_eq!(now + later, 20);
        assert!(later > 0);
    }

    #[test]
    fn single_area_round_matches_centralized() {
        let model = DiscreteModel::from_matrices(
            dmatrix![0.9, 0.05; -0.05, 0.9],
            dmatrix![0.1; 0.2],
            Mat::identity(2, 2),
            Mat::identity(1, 1),
            Mat::identity(2, 2) * 1e-4,
            Mat::identity(2, 2) * 1e-2,
            Mat::identity(1, 1) * 1e-2,
            1e-3,
        )
        .unwrap();
        let ctx = Arc::new(DsieContext::new(model, BddConfig::default()).unwrap());
        let state = FilterState::new(ctx, dvector![0.0, 0.0], Mat::identity(2, 2)).unwrap();
        let mut areas = vec![AreaEstimator::new("all", state.clone(), BTreeMap::new())];
        let mut central = state;
        let mut transport = LossyTransport::lossless();
        for k in 0..20 {
            let z = AreaMeasurement {
                z_u_prev: dvector![1.0 + 0.01 * k as f64],
                z_x_now: dvector![0.3, -0.2 * k as f64],
            };
            let reports = run_round(&mut areas, std::slice::from_ref(&z), &mut transport).unwrap();
            assert!(reports[0].transport_errors.is_empty());
            central = estimator::dsie_step(&central, &z.z_u_prev, &z.z_x_now).unwrap().state;
            assert_eq!(areas[0].state.x_hat, central.x_hat);
            assert_eq!(areas[0].state.p_x, central.p_x);
        }
    }
}
