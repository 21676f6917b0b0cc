//! Ground-truth simulation, μPMU measurement synthesis and attack injection.
//!
//! Noise levels are given as fractions of a per-variable nominal magnitude:
//! the `|d + jq|` of the variable at the initial steady state, floored at
//! `1e-3` of the largest magnitude of the same kind (`i`, `it`, `v`, `vt`,
//! `il`) so that idle branches still see noise. Both axes of a variable
//! share one standard deviation.
//!
//! Random streams are split from one master seed by (replicate, purpose)
//! using ChaCha stream ids, so every stream is reproducible on its own.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{BddConfig, BddPolicy, Threshold};
use crate::model::{
    self, build_continuous, build_measurement, ContinuousModel, DiscreteModel, MeasurementModel, ModelError,
    NetworkTopology, ProcessNoise, VarIndex,
};
use crate::numerics::{self, NumericsError};
use crate::{Mat, Vector};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("scenario parse error at line {line}, column {column}, field `{path}`: {message}")]
    Parse {
        line: usize,
        column: usize,
        path: String,
        message: String,
    },
    #[error("invalid scenario: {path}: {message}")]
    InvalidScenario { path: String, message: String },
    #[error("state matrix is singular; no steady state for the initial inputs")]
    SingularAtSteadyState,
    #[error("attacks[{index}]: window [{start}, {end}) outside [0, {duration}]")]
    WindowOutOfRange { index: usize, start: f64, end: f64, duration: f64 },
    #[error("attack support cannot carry a column-space vector (projection residual {residual:.3e})")]
    UnreachableSupport { residual: f64 },
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
}

type Result<T> = std::result::Result<T, SimError>;

// ---------------------------------------------------------------------------
// Scenario schema
// ---------------------------------------------------------------------------

fn one() -> u32 {
    1
}
fn default_ts() -> f64 {
    1e-3
}
fn default_process_fraction() -> f64 {
    7.5e-4
}
fn default_measurement_fraction() -> f64 {
    1e-3
}
fn default_period() -> f64 {
    0.1
}
fn default_step_magnitude() -> f64 {
    0.2
}
fn default_alpha() -> f64 {
    0.01
}
fn default_kappa() -> f64 {
    3.0
}
fn default_cov_scale() -> f64 {
    10.0
}
fn default_methods() -> Vec<Method> {
    vec![Method::Dsie, Method::Wls, Method::Tse]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dsie,
    Wls,
    Tse,
    DistributedDsie,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dsie => "dsie",
            Method::Wls => "wls",
            Method::Tse => "tse",
            Method::DistributedDsie => "distributed-dsie",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::Dsie, Method::Wls, Method::Tse, Method::DistributedDsie]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionChoice {
    /// Areas declared in the network file.
    #[default]
    Network,
    /// Whole network as one area.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadEvent {
    pub time: f64,
    /// Input variable id, e.g. `il:ld2`.
    pub input: String,
    pub value: [f64; 2],
}

/// Random load changes at a fixed cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSteps {
    #[serde(default = "default_period")]
    pub period: f64,
    /// New value = nominal · (1 + δ), δ ~ U(−magnitude, magnitude).
    #[serde(default = "default_step_magnitude")]
    pub relative_magnitude: f64,
    /// Input ids to vary; empty means every load current.
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default = "default_process_fraction")]
    pub process_fraction: f64,
    #[serde(default = "default_measurement_fraction")]
    pub measurement_fraction: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            process_fraction: default_process_fraction(),
            measurement_fraction: default_measurement_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    /// Added to every state coordinate as a fraction of its nominal magnitude.
    #[serde(default)]
    pub offset_fraction: f64,
    /// `P₀ = diag(scale · magnitude²)`.
    #[serde(default = "default_cov_scale")]
    pub covariance_scale: f64,
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self {
            offset_fraction: 0.0,
            covariance_scale: default_cov_scale(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    #[default]
    AlertOnly,
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSpec {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Overrides the chi-square threshold when set.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub policy: PolicyName,
    /// Cross-check gate in standard deviations.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

impl Default for DetectionSpec {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            threshold: None,
            policy: PolicyName::AlertOnly,
            kappa: default_kappa(),
        }
    }
}

impl DetectionSpec {
    pub fn threshold(&self) -> Threshold {
        match self.threshold {
            Some(z) => Threshold::Fixed(z),
            None => Threshold::ChiSquare { alpha: self.alpha },
        }
    }

    pub fn bdd_config(&self) -> BddConfig {
        BddConfig {
            threshold: self.threshold(),
            policy: match self.policy {
                PolicyName::AlertOnly => BddPolicy::AlertOnly,
                PolicyName::Hold => BddPolicy::Hold,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSpec {
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub max_delay: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackTarget {
    StateMeasurements,
    InputMeasurements,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AttackMode {
    /// Adds `values` to the selected coordinates (state block first for `both`).
    AdditiveFixed { values: Vec<f64> },
    /// Column-space attack scaled to `magnitude` × nominal channel values.
    StealthyWls { magnitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// `[start, end)` in seconds.
    pub window: [f64; 2],
    pub target: AttackTarget,
    pub mode: AttackMode,
    /// Sensor targets to corrupt; empty means every channel of the target.
    #[serde(default)]
    pub channels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "one")]
    pub version: u32,
    /// Network file, relative to the scenario file.
    pub network: String,
    #[serde(default = "default_ts")]
    pub ts: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub load_events: Vec<LoadEvent>,
    #[serde(default)]
    pub load_steps: Option<LoadSteps>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub detection: DetectionSpec,
    #[serde(default)]
    pub transport: TransportSpec,
    /// Random-walk intensity of the tracking baseline, as a fraction of
    /// nominal magnitude per step; defaults to `noise.process_fraction`.
    #[serde(default)]
    pub tse_process_fraction: Option<f64>,
    /// Relative error applied to line and filter R and L in the estimators'
    /// model.
    #[serde(default)]
    pub parameter_mismatch: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub partition: PartitionChoice,
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| SimError::Parse {
            line: e.inner().line(),
            column: e.inner().column(),
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if s.version != SCENARIO_SCHEMA_VERSION {
            return Err(invalid("version", format!("unsupported version {}", s.version)));
        }
        Ok(s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.ts).round() as usize
    }

    /// Every violation, with field paths.
    pub fn validate(&self) -> Vec<SimError> {
        let mut errs = Vec::new();
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            errs.push(invalid("ts", format!("must be > 0, got {}", self.ts)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            errs.push(invalid("duration", format!("must be > 0, got {}", self.duration)));
        }
        for (k, e) in self.load_events.iter().enumerate() {
            if !(0.0..=self.duration).contains(&e.time) {
                errs.push(invalid(format!("load_events[{k}].time"), "outside the scenario duration"));
            }
        }
        if let Some(ls) = &self.load_steps {
            if !(ls.period > 0.0) {
                errs.push(invalid("load_steps.period", "must be > 0"));
            }
            if !(ls.relative_magnitude >= 0.0) {
                errs.push(invalid("load_steps.relative_magnitude", "must be >= 0"));
            }
        }
        for (path, v) in [
            ("noise.process_fraction", self.noise.process_fraction),
            ("noise.measurement_fraction", self.noise.measurement_fraction),
            ("tse_process_fraction", self.tse_process_fraction.unwrap_or(0.0)),
            ("initial.covariance_scale", self.initial.covariance_scale),
            ("detection.kappa", self.detection.kappa),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(invalid(path, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.detection.alpha > 0.0 && self.detection.alpha < 1.0) {
            errs.push(invalid("detection.alpha", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.transport.drop_probability) {
            errs.push(invalid("transport.drop_probability", "must lie in [0, 1]"));
        }
        if !(self.parameter_mismatch > -1.0) {
            errs.push(invalid("parameter_mismatch", "must be > -1"));
        }
        if self.methods.is_empty() {
            errs.push(invalid("methods", "at least one method is required"));
        }
        for (index, a) in self.attacks.iter().enumerate() {
            let [start, end] = a.window;
            if !(start >= 0.0 && start < end && end <= self.duration) {
                errs.push(SimError::WindowOutOfRange {
                    index,
                    start,
                    end,
                    duration: self.duration,
                });
            }
        }
        errs
    }
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> SimError {
    SimError::InvalidScenario {
        path: path.into(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    LoadSteps = 1,
    Process = 2,
    Measurement = 3,
    Transport = 4,
}

/// Independent generator for one (replicate, purpose) pair.
pub fn stream_rng(master: u64, replicate: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((replicate << 8) | purpose as u64);
    rng
}

/// Seed for components that take a plain `u64`.
pub fn derived_seed(master: u64, replicate: u64, purpose: Purpose) -> u64 {
    stream_rng(master, replicate, purpose).random()
}

// ---------------------------------------------------------------------------
// Truth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrajectory {
    pub times: Vec<f64>,
    pub x: Vec<Vector>,
    /// Input held over `[t_k, t_{k+1})`.
    pub u: Vec<Vector>,
}

impl TruthTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    SteadyState,
    Zero,
    Given(Vector),
}

/// Exact ZOH stepping of `ẋ = Ax + Bu` under the piecewise-constant input
/// sequence `inputs` (one vector per step, `x` has the same length), plus
/// Gaussian process noise with per-coordinate `process_std`.
pub fn simulate_truth(
    model: &ContinuousModel,
    ts: f64,
    inputs: &[Vector],
    process_std: &Vector,
    init: &InitialCondition,
    rng: &mut impl Rng,
) -> Result<TruthTrajectory> {
    let n = model.a.nrows();
    let (a_d, b_d) = numerics::discretize_zoh(&model.a, &model.b, ts)?;
    let Some(u0) = inputs.first() else {
        return Ok(TruthTrajectory {
            times: vec![],
            x: vec![],
            u: vec![],
        });
    };
    let x0 = match init {
        InitialCondition::SteadyState => model.steady_state(u0).ok_or(SimError::SingularAtSteadyState)?,
        InitialCondition::Zero => Vector::zeros(n),
        InitialCondition::Given(x) => x.clone(),
    };
    let noisy = process_std.iter().any(|s| *s > 0.0);
    let mut x = Vec::with_capacity(inputs.len());
    x.push(x0);
    for k in 1..inputs.len() {
        let mut next = &a_d * &x[k - 1] + &b_d * &inputs[k - 1];
        if noisy {
            for (i, s) in process_std.iter().enumerate() {
                let e: f64 = StandardNormal.sample(rng);
                next[i] += s * e;
            }
        }
        x.push(next);
    }
    Ok(TruthTrajectory {
        times: (0..inputs.len()).map(|k| k as f64 * ts).collect(),
        x,
        u: inputs.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementStreams {
    pub z_x: Vec<Vector>,
    pub z_u: Vec<Vector>,
}

/// `z_x = Cx + v_x`, `z_u = Du + v_u` at every step.
pub fn generate_measurements(
    truth: &TruthTrajectory,
    c: &Mat,
    d: &Mat,
    std_x: &Vector,
    std_u: &Vector,
    rng: &mut impl Rng,
) -> MeasurementStreams {
    let mut noisy = |clean: Vector, std: &Vector| {
        let mut z = clean;
        for (i, s) in std.iter().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            z[i] += s * e;
        }
        z
    };
    let mut z_x = Vec::with_capacity(truth.len());
    let mut z_u = Vec::with_capacity(truth.len());
    for k in 0..truth.len() {
        z_x.push(noisy(c * &truth.x[k], std_x));
        z_u.push(noisy(d * &truth.u[k], std_u));
    }
    MeasurementStreams { z_x, z_u }
}

// ---------------------------------------------------------------------------
// Attacks
// ---------------------------------------------------------------------------

/// `a = H·c` restricted to `rows`, with `a[rows] = magnitude · template[rows]`.
/// Fails when no `c` reproduces that vector exactly.
pub fn craft_stealthy_attack(h: &Mat, rows: &[usize], template: &Vector, magnitude: f64) -> Result<Vector> {
    let mut desired = Vector::zeros(h.nrows());
    for &r in rows {
        desired[r] = magnitude * template[r];
    }
    if desired.norm() == 0.0 {
        return Ok(desired);
    }
    let svd = h.clone().svd(true, true);
    let c = svd.solve(&desired, 1e-12 * svd.singular_values.max()).map_err(|_| SimError::UnreachableSupport {
        residual: desired.norm(),
    })?;
    let a = h * c;
    let residual = (&a - &desired).norm();
    if residual > 1e-9 * desired.norm() {
        return Err(SimError::UnreachableSupport { residual });
    }
    Ok(a)
}

/// Attack with its window converted to steps and vectors resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedAttack {
    /// Active for `start <= k < end`.
    pub start: usize,
    pub end: usize,
    pub on_state: Option<Vector>,
    pub on_input: Option<Vector>,
}

/// Adds attack vectors inside their windows; pure.
pub fn apply_attacks(streams: &MeasurementStreams, attacks: &[ResolvedAttack]) -> MeasurementStreams {
    let mut out = streams.clone();
    for a in attacks {
        for k in a.start..a.end.min(out.z_x.len()) {
            if let Some(v) = &a.on_state {
                out.z_x[k] += v;
            }
            if let Some(v) = &a.on_input {
                out.z_u[k] += v;
            }
        }
    }
    out
}

/// Rows of `channels` (sensor target ids) inside a channel list of pairs.
fn channel_rows(all: &[String], selected: &[String]) -> Result<Vec<usize>> {
    if selected.is_empty() {
        return Ok((0..2 * all.len()).collect());
    }
    let mut rows = Vec::new();
    for s in selected {
        let pos = all
            .iter()
            .position(|c| c == s)
            .ok_or_else(|| SimError::UnknownChannel(s.clone()))?;
        rows.extend([2 * pos, 2 * pos + 1]);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

/// Nominal operating point and per-coordinate magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Nominal {
    pub x: Vector,
    pub u: Vector,
    pub x_magnitude: Vector,
    pub u_magnitude: Vector,
}

/// A scenario bound to its network: truth system, estimator model and noise
/// levels, ready to be replicated.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: Scenario,
    pub topology: NetworkTopology,
    pub truth: ContinuousModel,
    pub measurement: MeasurementModel,
    /// Truth process noise std per state coordinate.
    pub process_std: Vector,
    /// Truth measurement noise std per channel coordinate.
    pub std_x: Vector,
    pub std_u: Vector,
    /// Network as the estimators see it (parameter mismatch, floored stds).
    pub filter_topology: NetworkTopology,
    pub filter_process: ProcessNoise,
    pub filter_model: DiscreteModel,
    pub nominal: Nominal,
}

/// Relative floor keeping estimator covariances positive definite when the
/// configured noise is zero.
const FILTER_STD_FLOOR: f64 = 1e-6;

fn kind(id: &str) -> &str {
    id.split(':').next().unwrap_or(id)
}

fn pair_magnitudes(index: &VarIndex, v: &Vector) -> BTreeMap<String, f64> {
    index
        .ids()
        .iter()
        .map(|id| {
            let p = index.pair(id).unwrap();
            (id.clone(), v[p].hypot(v[p + 1]))
        })
        .collect()
}

impl Experiment {
    pub fn new(scenario: Scenario, topology: NetworkTopology) -> Result<Self> {
        if let Some(e) = scenario.validate().into_iter().next() {
            return Err(e);
        }
        if let Some(e) = topology.validate().into_iter().next() {
            return Err(e.into());
        }
        let truth = build_continuous(&topology)?;
        let u0 = topology.nominal_inputs(&truth.inputs);
        let x0 = truth.steady_state(&u0).ok_or(SimError::SingularAtSteadyState)?;

        // floored magnitude per variable id
        let mut mags = pair_magnitudes(&truth.states, &x0);
        mags.extend(pair_magnitudes(&truth.inputs, &u0));
        let mut kind_max: BTreeMap<String, f64> = BTreeMap::new();
        for (id, m) in &mags {
            let e = kind_max.entry(kind(id).to_string()).or_insert(0.0);
            *e = e.max(*m);
        }
        let global_max = kind_max.values().cloned().fold(0.0, f64::max).max(1.0);
        for (id, m) in mags.iter_mut() {
            let floor = 1e-3 * kind_max[kind(id)].max(1e-3 * global_max);
            *m = m.max(floor);
        }
        let coord_mags = |index: &VarIndex| {
            let mut v = Vector::zeros(index.dim());
            for id in index.ids() {
                let p = index.pair(id).unwrap();
                v[p] = mags[id];
                v[p + 1] = mags[id];
            }
            v
        };
        let nominal = Nominal {
            x_magnitude: coord_mags(&truth.states),
            u_magnitude: coord_mags(&truth.inputs),
            x: x0,
            u: u0,
        };

        let noise = &scenario.noise;
        let mut truth_topology = topology.clone();
        for s in &mut truth_topology.sensors {
            let m = mags.get(&s.target).copied().unwrap_or(1.0);
            s.std = Some(noise.measurement_fraction * m);
        }
        let measurement = build_measurement(&truth_topology, &truth.states, &truth.inputs)?;
        let process_std = nominal.x_magnitude.map(|m| noise.process_fraction * m);
        let std_x = measurement.r_x.diagonal().map(f64::sqrt);
        let std_u = measurement.r_u.diagonal().map(f64::sqrt);

        let mut filter_topology = truth_topology.clone();
        for s in &mut filter_topology.sensors {
            let m = mags.get(&s.target).copied().unwrap_or(1.0);
            s.std = Some(s.std.unwrap_or(0.0).max(FILTER_STD_FLOOR * m));
        }
        let k = 1.0 + scenario.parameter_mismatch;
        for l in &mut filter_topology.lines {
            l.resistance *= k;
            l.inductance *= k;
        }
        for d in &mut filter_topology.dgus {
            d.resistance *= k;
            d.inductance *= k;
        }
        let filter_process = ProcessNoise::PerState(
            truth
                .states
                .ids()
                .iter()
                .map(|id| {
                    let m = mags[id];
                    (id.clone(), (noise.process_fraction * m).max(FILTER_STD_FLOOR * m))
                })
                .collect(),
        );
        let filter_model = model::build_discrete(&filter_topology, scenario.ts, &filter_process)?;

        Ok(Self {
            scenario,
            topology,
            truth,
            measurement,
            process_std,
            std_x,
            std_u,
            filter_topology,
            filter_process,
            filter_model,
            nominal,
        })
    }

    pub fn steps(&self) -> usize {
        self.scenario.steps()
    }

    /// Input sequence over `0..=steps`, explicit events plus random load steps.
    pub fn input_schedule(&self, replicate: u64) -> Result<Vec<Vector>> {
        let inputs = &self.truth.inputs;
        let mut events: Vec<(f64, usize, [f64; 2])> = Vec::new();
        for (k, e) in self.scenario.load_events.iter().enumerate() {
            let p = inputs
                .pair(&e.input)
                .ok_or_else(|| invalid(format!("load_events[{k}].input"), format!("unknown input `{}`", e.input)))?;
            events.push((e.time, p, e.value));
        }
        if let Some(ls) = &self.scenario.load_steps {
            let targets: Vec<String> = if ls.inputs.is_empty() {
                inputs.ids().iter().filter(|id| kind(id) == "il").cloned().collect()
            } else {
                ls.inputs.clone()
            };
            let mut pos = Vec::new();
            for id in &targets {
                pos.push(
                    inputs
                        .pair(id)
                        .ok_or_else(|| invalid("load_steps.inputs", format!("unknown input `{id}`")))?,
                );
            }
            let mut rng = stream_rng(self.scenario.seed, replicate, Purpose::LoadSteps);
            let mut tick = 1;
            while (tick as f64) * ls.period < self.scenario.duration {
                let t = tick as f64 * ls.period;
                for &p in &pos {
                    let delta = if ls.relative_magnitude > 0.0 {
                        rng.random_range(-ls.relative_magnitude..=ls.relative_magnitude)
                    } else {
                        0.0
                    };
                    let s = 1.0 + delta;
                    events.push((t, p, [self.nominal.u[p] * s, self.nominal.u[p + 1] * s]));
                }
                tick += 1;
            }
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));

        let ts = self.scenario.ts;
        let steps = self.steps();
        let mut u = self.nominal.u.clone();
        let mut schedule = Vec::with_capacity(steps + 1);
        let mut next = 0;
        for k in 0..=steps {
            while next < events.len() && ((events[next].0 / ts).round() as usize) <= k {
                let (_, p, v) = events[next];
                u[p] = v[0];
                u[p + 1] = v[1];
                next += 1;
            }
            schedule.push(u.clone());
        }
        Ok(schedule)
    }

    pub fn simulate_truth(&self, replicate: u64) -> Result<TruthTrajectory> {
        let schedule = self.input_schedule(replicate)?;
        let mut rng = stream_rng(self.scenario.seed, replicate, Purpose::Process);
        simulate_truth(
            &self.truth,
            self.scenario.ts,
            &schedule,
            &self.process_std,
            &InitialCondition::SteadyState,
            &mut rng,
        )
    }

    pub fn measure(&self, truth: &TruthTrajectory, replicate: u64) -> MeasurementStreams {
        let mut rng = stream_rng(self.scenario.seed, replicate, Purpose::Measurement);
        generate_measurements(
            truth,
            &self.measurement.c,
            &self.measurement.d,
            &self.std_x,
            &self.std_u,
            &mut rng,
        )
    }

    pub fn resolve_attacks(&self) -> Result<Vec<ResolvedAttack>> {
        let ts = self.scenario.ts;
        let z_x_nominal = &self.measurement.c * &self.nominal.x;
        let z_u_nominal = &self.measurement.d * &self.nominal.u;
        let mut out = Vec::new();
        for (index, spec) in self.scenario.attacks.iter().enumerate() {
            let [start, end] = spec.window;
            if !(start >= 0.0 && start < end && end <= self.scenario.duration) {
                return Err(SimError::WindowOutOfRange {
                    index,
                    start,
                    end,
                    duration: self.scenario.duration,
                });
            }
            let (on_x, on_u) = match spec.target {
                AttackTarget::StateMeasurements => (true, false),
                AttackTarget::InputMeasurements => (false, true),
                AttackTarget::Both => (true, true),
            };
            // channels are filtered per block; unknown ids in both blocks fail
            let pick = |all: &[String]| -> Vec<String> {
                if spec.channels.is_empty() {
                    all.to_vec()
                } else {
                    spec.channels.iter().filter(|c| all.contains(c)).cloned().collect()
                }
            };
            for c in &spec.channels {
                let in_x = on_x && self.measurement.state_channels.contains(c);
                let in_u = on_u && self.measurement.input_channels.contains(c);
                if !in_x && !in_u {
                    return Err(SimError::UnknownChannel(c.clone()));
                }
            }
            let x_rows = if on_x {
                channel_rows(&self.measurement.state_channels, &pick(&self.measurement.state_channels))?
            } else {
                vec![]
            };
            let u_rows = if on_u {
                channel_rows(&self.measurement.input_channels, &pick(&self.measurement.input_channels))?
            } else {
                vec![]
            };
            let (on_state, on_input) = match &spec.mode {
                AttackMode::StealthyWls { magnitude } => (
                    on_x.then(|| craft_stealthy_attack(&self.measurement.c, &x_rows, &z_x_nominal, *magnitude))
                        .transpose()?,
                    on_u.then(|| craft_stealthy_attack(&self.measurement.d, &u_rows, &z_u_nominal, *magnitude))
                        .transpose()?,
                ),
                AttackMode::AdditiveFixed { values } => {
                    if values.len() != x_rows.len() + u_rows.len() {
                        return Err(invalid(
                            format!("attacks[{index}].mode.values"),
                            format!("expected {} values, got {}", x_rows.len() + u_rows.len(), values.len()),
                        ));
                    }
                    let scatter = |rows: &[usize], vals: &[f64], len: usize| {
                        let mut v = Vector::zeros(len);
                        for (r, x) in rows.iter().zip(vals) {
                            v[*r] = *x;
                        }
                        v
                    };
                    let (vx, vu) = values.split_at(x_rows.len());
                    (
                        on_x.then(|| scatter(&x_rows, vx, z_x_nominal.len())),
                        on_u.then(|| scatter(&u_rows, vu, z_u_nominal.len())),
                    )
                }
            };
            out.push(ResolvedAttack {
                start: (start / ts).round() as usize,
                end: (end / ts).round() as usize,
                on_state,
                on_input,
            });
        }
        Ok(out)
    }

    /// Truth, clean streams and attacked streams for one replicate.
    pub fn replicate(&self, replicate: u64) -> Result<(TruthTrajectory, MeasurementStreams)> {
        let truth = self.simulate_truth(replicate)?;
        let clean = self.measure(&truth, replicate);
        let attacks = self.resolve_attacks()?;
        Ok((truth, apply_attacks(&clean, &attacks)))
    }

    /// `x̂₀` and `P₀` for the estimators.
    pub fn initial_estimate(&self) -> (Vector, Mat) {
        let x0 = &self.nominal.x + self.nominal.x_magnitude.map(|m| self.scenario.initial.offset_fraction * m);
        let p0 = Mat::from_diagonal(&self.nominal.x_magnitude.map(|m| self.scenario.initial.covariance_scale * m * m));
        (x0, p0)
    }

    /// `[x₀; u₀]`, `P₀` and `Q_tse` for the tracking baseline.
    pub fn tracking_setup(&self) -> (Vector, Mat, Mat) {
        let (x0, px) = self.initial_estimate();
        let s0 = numerics::vstack(&[&x0, &self.nominal.u]);
        let pu = Mat::from_diagonal(&self.nominal.u_magnitude.map(|m| self.scenario.initial.covariance_scale * m * m));
        let p0 = numerics::block_diag(&[&px, &pu]);
        let mags = numerics::vstack(&[&self.nominal.x_magnitude, &self.nominal.u_magnitude]);
        let f = self
            .scenario
            .tse_process_fraction
            .unwrap_or(self.scenario.noise.process_fraction);
        let q = Mat::from_diagonal(&mags.map(|m| (f * m).powi(2).max((FILTER_STD_FLOOR * m).powi(2))));
        (s0, p0, q)
    }
}
