//! Network description and dq-frame state-space assembly.
//!
//! Every complex dq quantity `a_d + j·a_q` is stored as an interleaved real
//! pair `(d, q)`. A complex coefficient `α + jβ` therefore becomes the real
//! block `[[α, -β], [β, α]]`; the rotating-frame term `-jω_o` becomes
//! `[[0, ω_o], [-ω_o, 0]]` on the diagonal of every dynamic element.
//!
//! Variable naming:
//!
//! | id            | meaning                                  | lands in |
//! |---------------|------------------------------------------|----------|
//! | `i:<line>`    | line current, flowing `to_bus → from_bus`| x        |
//! | `it:<dgu>`    | DGU filter current                        | x        |
//! | `v:<bus>`     | bus voltage (capacitor or DGU bus)        | x        |
//! | `v:<bus>`     | bus voltage (no capacitance)              | u        |
//! | `vt:<dgu>`    | DGU inverter terminal voltage             | u        |
//! | `il:<load>`   | load current drawn from its bus           | u        |
//!
//! Coordinates of a variable are addressed as `<id>.d` and `<id>.q`.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, NumericsError};
use crate::{Mat, Vector};

/// Current version of the network file schema.
pub const NETWORK_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("parse error at line {line}, column {column}, field `{path}`: {message}")]
    Parse {
        line: usize,
        column: usize,
        path: String,
        message: String,
    },
    #[error("{path}: duplicate id `{id}`")]
    DuplicateId { path: String, id: String },
    #[error("{path}: unknown bus `{bus}`")]
    UnknownBus { path: String, bus: String },
    #[error("{path}: {message}")]
    InvalidParameter { path: String, message: String },
    #[error("network is not connected: bus `{0}` is unreachable")]
    Disconnected(String),
    #[error("bus `{0}` has no capacitance and no incident line; its voltage enters no state equation")]
    UnrepresentableTopology(String),
    #[error("{path}: unknown sensor target `{target}`")]
    UnknownSensorTarget { path: String, target: String },
    #[error("{path}: sensor has no noise standard deviation")]
    MissingNoise { path: String },
    #[error("element `{0}` is not assigned to any area")]
    UnassignedElement(String),
    #[error("element `{element}` is assigned to both `{first}` and `{second}`")]
    MultiplyAssigned {
        element: String,
        first: String,
        second: String,
    },
    #[error("shared bus `{bus}` declared by area `{area}` is not on the boundary of two areas: {reason}")]
    NonAdjacentShare {
        area: String,
        bus: String,
        reason: String,
    },
    #[error("bus `{bus}` joins areas {areas:?} but is not declared shared by all of them")]
    UndeclaredBoundary { bus: String, areas: Vec<String> },
    #[error("area `{area}`: {message}")]
    InvalidPartition { area: String, message: String },
    #[error("{0}")]
    Numerics(#[from] NumericsError),
}

// ---------------------------------------------------------------------------
// Network file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: String,
    /// Line-to-neutral peak voltage used as the d-axis value for inputs.
    pub nominal_voltage: f64,
    #[serde(default)]
    pub has_capacitor: bool,
    /// Farads; present iff `has_capacitor`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacitance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub id: String,
    pub from_bus: String,
    pub to_bus: String,
    /// Ohms.
    pub resistance: f64,
    /// Henries.
    pub inductance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dgu {
    pub id: String,
    pub at_bus: String,
    pub resistance: f64,
    pub inductance: f64,
    pub capacitance: f64,
    pub gain: f64,
    /// Initial inverter terminal voltage `(d, q)`.
    pub terminal_voltage: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub id: String,
    pub at_bus: String,
    /// Initial load current `(d, q)` drawn from the bus.
    pub current: [f64; 2],
}

/// One μPMU channel pair measuring a state or input variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sensor {
    pub target: String,
    /// Per-axis standard deviation; may be filled in later from a scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaSpec {
    pub elements: Vec<String>,
    #[serde(default)]
    pub shared_buses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkTopology {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Angular frequency of the dq frame, rad/s.
    pub omega_o: f64,
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub lines: Vec<Line>,
    #[serde(default)]
    pub dgus: Vec<Dgu>,
    #[serde(default)]
    pub loads: Vec<Load>,
    #[serde(default)]
    pub sensors: Vec<Sensor>,
    #[serde(default)]
    pub areas: BTreeMap<String, AreaSpec>,
}

fn default_version() -> u32 {
    NETWORK_SCHEMA_VERSION
}

impl NetworkTopology {
    /// Parses a network document. Semantic checks are left to [`validate`].
    ///
    /// [`validate`]: NetworkTopology::validate
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ModelError::Parse {
            line: e.inner().line(),
            column: e.inner().column(),
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    fn bus(&self, id: &str) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    /// A bus whose voltage is a state: it has a capacitor bank or hosts a DGU.
    pub fn is_capacitive(&self, bus: &str) -> bool {
        self.bus(bus).is_some_and(|b| b.has_capacitor) || self.dgus.iter().any(|d| d.at_bus == bus)
    }

    fn total_capacitance(&self, bus: &str) -> f64 {
        let own = self
            .bus(bus)
            .and_then(|b| if b.has_capacitor { b.capacitance } else { None })
            .unwrap_or(0.0);
        own + self
            .dgus
            .iter()
            .filter(|d| d.at_bus == bus)
            .map(|d| d.capacitance)
            .sum::<f64>()
    }

    /// Every schema and physical-invariant violation, in document order.
    pub fn validate(&self) -> Vec<ModelError> {
        let mut errs = self.validate_local();
        if errs.is_empty() {
            if let Some(e) = self.connectivity_error() {
                errs.push(e);
            }
        }
        errs
    }

    /// Checks that hold for sub-networks too (everything except connectivity).
    fn validate_local(&self) -> Vec<ModelError> {
        let mut errs = Vec::new();
        let invalid = |path: String, message: &str| ModelError::InvalidParameter {
            path,
            message: message.to_string(),
        };

        if self.version != NETWORK_SCHEMA_VERSION {
            errs.push(invalid(
                "version".into(),
                &format!("unsupported schema version {} (expected {NETWORK_SCHEMA_VERSION})", self.version),
            ));
        }
        if !(self.omega_o.is_finite() && self.omega_o >= 0.0) {
            errs.push(invalid("omega_o".into(), "must be finite and non-negative"));
        }
        if self.buses.is_empty() {
            errs.push(invalid("buses".into(), "at least one bus is required"));
        }

        let mut ids: HashMap<String, String> = HashMap::new();
        let mut claim = |errs: &mut Vec<ModelError>, id: &str, path: String| {
            if id.is_empty() || id.contains(['.', ':']) {
                errs.push(invalid(format!("{path}.id"), "ids must be non-empty and contain no '.' or ':'"));
            }
            if ids.insert(id.to_string(), path.clone()).is_some() {
                errs.push(ModelError::DuplicateId {
                    path: format!("{path}.id"),
                    id: id.to_string(),
                });
            }
        };
        // ids of different element kinds live in one namespace so that area
        // element lists are unambiguous
        for (i, b) in self.buses.iter().enumerate() {
            claim(&mut errs, &b.id, format!("buses[{i}]"));
        }
        for (i, l) in self.lines.iter().enumerate() {
            claim(&mut errs, &l.id, format!("lines[{i}]"));
        }
        for (i, d) in self.dgus.iter().enumerate() {
            claim(&mut errs, &d.id, format!("dgus[{i}]"));
        }
        for (i, l) in self.loads.iter().enumerate() {
            claim(&mut errs, &l.id, format!("loads[{i}]"));
        }

        for (i, b) in self.buses.iter().enumerate() {
            let path = format!("buses[{i}]");
            if !b.nominal_voltage.is_finite() {
                errs.push(invalid(format!("{path}.nominal_voltage"), "must be finite"));
            }
            match (b.has_capacitor, b.capacitance) {
                (true, Some(c)) if !(c > 0.0 && c.is_finite()) => {
                    errs.push(invalid(format!("{path}.capacitance"), "must be > 0"))
                }
                (true, None) => errs.push(invalid(
                    format!("{path}.capacitance"),
                    "required when has_capacitor is true",
                )),
                (false, Some(_)) => errs.push(invalid(
                    format!("{path}.capacitance"),
                    "present but has_capacitor is false",
                )),
                _ => {}
            }
        }

        let bus_known = |id: &str| self.bus(id).is_some();
        for (i, l) in self.lines.iter().enumerate() {
            let path = format!("lines[{i}]");
            for (field, bus) in [("from_bus", &l.from_bus), ("to_bus", &l.to_bus)] {
                if !bus_known(bus) {
                    errs.push(ModelError::UnknownBus {
                        path: format!("{path}.{field}"),
                        bus: bus.clone(),
                    });
                }
            }
            if l.from_bus == l.to_bus {
                errs.push(invalid(format!("{path}.to_bus"), "line endpoints must differ"));
            }
            if !(l.resistance >= 0.0 && l.resistance.is_finite()) {
                errs.push(invalid(format!("{path}.resistance"), "must be >= 0"));
            }
            if !(l.inductance > 0.0 && l.inductance.is_finite()) {
                errs.push(invalid(format!("{path}.inductance"), "must be > 0"));
            }
        }
        for (i, d) in self.dgus.iter().enumerate() {
            let path = format!("dgus[{i}]");
            if !bus_known(&d.at_bus) {
                errs.push(ModelError::UnknownBus {
                    path: format!("{path}.at_bus"),
                    bus: d.at_bus.clone(),
                });
            }
            if !(d.resistance >= 0.0 && d.resistance.is_finite()) {
                errs.push(invalid(format!("{path}.resistance"), "must be >= 0"));
            }
            for (field, v) in [("inductance", d.inductance), ("capacitance", d.capacitance), ("gain", d.gain)] {
                if !(v > 0.0 && v.is_finite()) {
                    errs.push(invalid(format!("{path}.{field}"), "must be > 0"));
                }
            }
            if d.terminal_voltage.iter().any(|v| !v.is_finite()) {
                errs.push(invalid(format!("{path}.terminal_voltage"), "must be finite"));
            }
        }
        for (i, l) in self.loads.iter().enumerate() {
            let path = format!("loads[{i}]");
            if !bus_known(&l.at_bus) {
                errs.push(ModelError::UnknownBus {
                    path: format!("{path}.at_bus"),
                    bus: l.at_bus.clone(),
                });
            }
            if l.current.iter().any(|v| !v.is_finite()) {
                errs.push(invalid(format!("{path}.current"), "must be finite"));
            }
        }

        if errs.is_empty() {
            for b in &self.buses {
                let touched = self.lines.iter().any(|l| l.from_bus == b.id || l.to_bus == b.id);
                if !self.is_capacitive(&b.id) && !touched {
                    errs.push(ModelError::UnrepresentableTopology(b.id.clone()));
                }
            }
        }

        if errs.is_empty() {
            let (states, inputs) = self.variable_indices();
            let mut seen = BTreeSet::new();
            for (i, s) in self.sensors.iter().enumerate() {
                let path = format!("sensors[{i}]");
                if states.pair(&s.target).is_none() && inputs.pair(&s.target).is_none() {
                    errs.push(ModelError::UnknownSensorTarget {
                        path: format!("{path}.target"),
                        target: s.target.clone(),
                    });
                }
                if !seen.insert(s.target.as_str()) {
                    errs.push(ModelError::DuplicateId {
                        path: format!("{path}.target"),
                        id: s.target.clone(),
                    });
                }
                if let Some(std) = s.std {
                    if !(std > 0.0 && std.is_finite()) {
                        errs.push(invalid(format!("{path}.std"), "must be > 0"));
                    }
                }
            }
        }
        errs
    }

    fn connectivity_error(&self) -> Option<ModelError> {
        let start = self.buses.first()?;
        let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
        for l in &self.lines {
            adj.entry(&l.from_bus).or_default().push(&l.to_bus);
            adj.entry(&l.to_bus).or_default().push(&l.from_bus);
        }
        let mut seen = BTreeSet::from([start.id.as_str()]);
        let mut queue = VecDeque::from([start.id.as_str()]);
        while let Some(b) = queue.pop_front() {
            for &nb in adj.get(b).into_iter().flatten() {
                if seen.insert(nb) {
                    queue.push_back(nb);
                }
            }
        }
        self.buses
            .iter()
            .find(|b| !seen.contains(b.id.as_str()))
            .map(|b| ModelError::Disconnected(b.id.clone()))
    }

    /// State and input orderings implied by the element lists.
    ///
    /// States: DGU currents, capacitive bus voltages, line currents.
    /// Inputs: DGU terminal voltages, non-capacitive bus voltages, load currents.
    pub fn variable_indices(&self) -> (VarIndex, VarIndex) {
        let mut states = VarIndex::default();
        let mut inputs = VarIndex::default();
        for d in &self.dgus {
            states.push(format!("it:{}", d.id));
        }
        for b in &self.buses {
            if self.is_capacitive(&b.id) {
                states.push(format!("v:{}", b.id));
            }
        }
        for l in &self.lines {
            states.push(format!("i:{}", l.id));
        }
        for d in &self.dgus {
            inputs.push(format!("vt:{}", d.id));
        }
        for b in &self.buses {
            if !self.is_capacitive(&b.id) {
                inputs.push(format!("v:{}", b.id));
            }
        }
        for l in &self.loads {
            inputs.push(format!("il:{}", l.id));
        }
        (states, inputs)
    }

    /// Input vector built from the nominal values in the document.
    pub fn nominal_inputs(&self, inputs: &VarIndex) -> Vector {
        let mut u = Vector::zeros(inputs.dim());
        for d in &self.dgus {
            if let Some(k) = inputs.pair(&format!("vt:{}", d.id)) {
                u[k] = d.terminal_voltage[0];
                u[k + 1] = d.terminal_voltage[1];
            }
        }
        for b in &self.buses {
            if let Some(k) = inputs.pair(&format!("v:{}", b.id)) {
                u[k] = b.nominal_voltage;
            }
        }
        for l in &self.loads {
            if let Some(k) = inputs.pair(&format!("il:{}", l.id)) {
                u[k] = l.current[0];
                u[k + 1] = l.current[1];
            }
        }
        u
    }
}

// ---------------------------------------------------------------------------
// Index maps
// ---------------------------------------------------------------------------

/// Ordered list of dq variables; variable `k` occupies rows `2k` and `2k+1`.
///
/// Models built from raw matrices use a width of one (scalar coordinates).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarIndex {
    ids: Vec<String>,
    pos: HashMap<String, usize>,
    width: usize,
}

impl Default for VarIndex {
    fn default() -> Self {
        Self {
            ids: Vec::new(),
            pos: HashMap::new(),
            width: 2,
        }
    }
}

impl VarIndex {
    fn push(&mut self, id: String) {
        self.pos.insert(id.clone(), self.ids.len());
        self.ids.push(id);
    }

    /// Index of dq-pair variables.
    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Self {
        let mut out = Self::default();
        for id in ids {
            out.push(id);
        }
        out
    }

    /// Index of scalar variables, one row each.
    pub fn scalars(ids: impl IntoIterator<Item = String>) -> Self {
        let mut out = Self {
            width: 1,
            ..Self::default()
        };
        for id in ids {
            out.push(id);
        }
        out
    }

    /// First row of `id`.
    pub fn pair(&self, id: &str) -> Option<usize> {
        self.pos.get(id).map(|k| self.width * k)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of real coordinates.
    pub fn dim(&self) -> usize {
        self.width * self.ids.len()
    }

    /// Coordinate names (`<id>.d`, `<id>.q` for pairs) in row order.
    pub fn coordinates(&self) -> Vec<String> {
        expand(&self.ids, self.width)
    }

    /// Row of a coordinate name such as `v:b3.q`.
    pub fn coordinate(&self, name: &str) -> Option<usize> {
        if self.width == 1 {
            return self.pair(name);
        }
        let (id, axis) = name.rsplit_once('.')?;
        let base = self.pair(id)?;
        match axis {
            "d" => Some(base),
            "q" => Some(base + 1),
            _ => None,
        }
    }
}

fn expand(ids: &[String], width: usize) -> Vec<String> {
    if width == 1 {
        return ids.to_vec();
    }
    ids.iter()
        .flat_map(|id| [format!("{id}.d"), format!("{id}.q")])
        .collect()
}

// ---------------------------------------------------------------------------
// Continuous model
// ---------------------------------------------------------------------------

/// `ẋ = Ax + Bu` in real dq coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a: Mat,
    pub b: Mat,
    pub states: VarIndex,
    pub inputs: VarIndex,
    pub omega_o: f64,
}

impl ContinuousModel {
    /// `x* = -A⁻¹Bu`; `None` when `A` is singular.
    pub fn steady_state(&self, u: &Vector) -> Option<Vector> {
        let rhs = -(&self.b * u);
        self.a.clone().lu().solve(&rhs)
    }
}

fn add_block(m: &mut Mat, row: usize, col: usize, re: f64, im: f64) {
    m[(row, col)] += re;
    m[(row, col + 1)] -= im;
    m[(row + 1, col)] += im;
    m[(row + 1, col + 1)] += re;
}

/// Adds `coef · var` to the equation at `row`, placing it in `A` or `B`.
fn add_term(a: &mut Mat, b: &mut Mat, states: &VarIndex, inputs: &VarIndex, row: usize, var: &str, coef: f64) {
    if let Some(col) = states.pair(var) {
        add_block(a, row, col, coef, 0.0);
    } else if let Some(col) = inputs.pair(var) {
        add_block(b, row, col, coef, 0.0);
    } else {
        unreachable!("variable {var} missing from both index maps");
    }
}

/// Assembles the continuous dq-frame model of the whole network.
pub fn build_continuous(topology: &NetworkTopology) -> Result<ContinuousModel, ModelError> {
    if let Some(e) = topology.validate().into_iter().next() {
        return Err(e);
    }
    Ok(assemble(topology))
}

fn assemble(t: &NetworkTopology) -> ContinuousModel {
    let (states, inputs) = t.variable_indices();
    let (n, m) = (states.dim(), inputs.dim());
    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, m);
    let w = t.omega_o;

    for d in &t.dgus {
        let row = states.pair(&format!("it:{}", d.id)).unwrap();
        // di_t/dt = (-R/L - jω) i_t + (v_t - k v_i)/L
        add_block(&mut a, row, row, -d.resistance / d.inductance, -w);
        add_term(&mut a, &mut b, &states, &inputs, row, &format!("vt:{}", d.id), 1.0 / d.inductance);
        add_term(&mut a, &mut b, &states, &inputs, row, &format!("v:{}", d.at_bus), -d.gain / d.inductance);
    }

    for bus in &t.buses {
        if !t.is_capacitive(&bus.id) {
            continue;
        }
        let row = states.pair(&format!("v:{}", bus.id)).unwrap();
        let c = t.total_capacitance(&bus.id);
        add_block(&mut a, row, row, 0.0, -w);
        for d in t.dgus.iter().filter(|d| d.at_bus == bus.id) {
            add_term(&mut a, &mut b, &states, &inputs, row, &format!("it:{}", d.id), d.gain / c);
        }
        for l in &t.lines {
            // line current flows to_bus -> from_bus
            if l.from_bus == bus.id {
                add_term(&mut a, &mut b, &states, &inputs, row, &format!("i:{}", l.id), 1.0 / c);
            } else if l.to_bus == bus.id {
                add_term(&mut a, &mut b, &states, &inputs, row, &format!("i:{}", l.id), -1.0 / c);
            }
        }
        for load in t.loads.iter().filter(|l| l.at_bus == bus.id) {
            add_term(&mut a, &mut b, &states, &inputs, row, &format!("il:{}", load.id), -1.0 / c);
        }
    }

    for l in &t.lines {
        let row = states.pair(&format!("i:{}", l.id)).unwrap();
        add_block(&mut a, row, row, -l.resistance / l.inductance, -w);
        add_term(&mut a, &mut b, &states, &inputs, row, &format!("v:{}", l.to_bus), 1.0 / l.inductance);
        add_term(&mut a, &mut b, &states, &inputs, row, &format!("v:{}", l.from_bus), -1.0 / l.inductance);
    }

    ContinuousModel {
        a,
        b,
        states,
        inputs,
        omega_o: w,
    }
}

// ---------------------------------------------------------------------------
// Measurement model
// ---------------------------------------------------------------------------

/// `z_x = Cx + v_x`, `z_u = Du + v_u` with diagonal noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub c: Mat,
    pub d: Mat,
    pub r_x: Mat,
    pub r_u: Mat,
    /// Sensor targets in `C` row-pair order.
    pub state_channels: Vec<String>,
    /// Sensor targets in `D` row-pair order.
    pub input_channels: Vec<String>,
}

pub fn build_measurement(
    topology: &NetworkTopology,
    states: &VarIndex,
    inputs: &VarIndex,
) -> Result<MeasurementModel, ModelError> {
    let mut state_rows = Vec::new();
    let mut input_rows = Vec::new();
    for (i, s) in topology.sensors.iter().enumerate() {
        let path = format!("sensors[{i}]");
        let std = s.std.ok_or_else(|| ModelError::MissingNoise { path: path.clone() })?;
        if let Some(col) = states.pair(&s.target) {
            state_rows.push((s.target.clone(), col, std));
        } else if let Some(col) = inputs.pair(&s.target) {
            input_rows.push((s.target.clone(), col, std));
        } else {
            return Err(ModelError::UnknownSensorTarget {
                path: format!("{path}.target"),
                target: s.target.clone(),
            });
        }
    }

    let select = |rows: &[(String, usize, f64)], cols: usize| {
        let mut sel = Mat::zeros(2 * rows.len(), cols);
        let mut var = Vector::zeros(2 * rows.len());
        for (k, (_, col, std)) in rows.iter().enumerate() {
            sel[(2 * k, *col)] = 1.0;
            sel[(2 * k + 1, col + 1)] = 1.0;
            var[2 * k] = std * std;
            var[2 * k + 1] = std * std;
        }
        (sel, Mat::from_diagonal(&var))
    };
    let (c, r_x) = select(&state_rows, states.dim());
    let (d, r_u) = select(&input_rows, inputs.dim());
    Ok(MeasurementModel {
        c,
        d,
        r_x,
        r_u,
        state_channels: state_rows.into_iter().map(|r| r.0).collect(),
        input_channels: input_rows.into_iter().map(|r| r.0).collect(),
    })
}

// ---------------------------------------------------------------------------
// Discrete model
// ---------------------------------------------------------------------------

/// Per-state process noise standard deviations (per axis, per step).
#[derive(Debug, Clone, PartialEq)]
pub enum ProcessNoise {
    Uniform(f64),
    /// Keyed by state variable id; both axes share the value.
    PerState(BTreeMap<String, f64>),
}

impl ProcessNoise {
    fn std_for(&self, id: &str) -> Option<f64> {
        match self {
            ProcessNoise::Uniform(s) => Some(*s),
            ProcessNoise::PerState(map) => map.get(id).copied(),
        }
    }
}

/// Discrete model `x_k = A_d x_{k-1} + B_d u_{k-1} + w`, with measurement
/// matrices and noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a_d: Mat,
    pub b_d: Mat,
    pub c: Mat,
    pub d: Mat,
    pub q: Mat,
    pub r_x: Mat,
    pub r_u: Mat,
    pub ts: f64,
    pub states: VarIndex,
    pub inputs: VarIndex,
    pub state_channels: Vec<String>,
    pub input_channels: Vec<String>,
}

impl DiscreteModel {
    /// Wraps raw matrices. States and inputs are named `x<k>`/`u<k>` and are
    /// scalar (one coordinate per name), so odd dimensions are allowed here.
    #[allow(clippy::too_many_arguments)]
    pub fn from_matrices(
        a_d: Mat,
        b_d: Mat,
        c: Mat,
        d: Mat,
        q: Mat,
        r_x: Mat,
        r_u: Mat,
        ts: f64,
    ) -> Result<Self, ModelError> {
        let (n, m) = (a_d.nrows(), b_d.ncols());
        let dims_ok = a_d.is_square()
            && b_d.nrows() == n
            && c.ncols() == n
            && d.ncols() == m
            && q.shape() == (n, n)
            && r_x.shape() == (c.nrows(), c.nrows())
            && r_u.shape() == (d.nrows(), d.nrows());
        if !dims_ok {
            return Err(NumericsError::DimensionMismatch("inconsistent model matrices".into()).into());
        }
        Ok(Self {
            state_channels: (0..c.nrows()).map(|k| format!("zx{k}")).collect(),
            input_channels: (0..d.nrows()).map(|k| format!("zu{k}")).collect(),
            a_d,
            b_d,
            c,
            d,
            q,
            r_x,
            r_u,
            ts,
            states: VarIndex::scalars((0..n).map(|k| format!("x{k}"))),
            inputs: VarIndex::scalars((0..m).map(|k| format!("u{k}"))),
        })
    }

    pub fn n(&self) -> usize {
        self.a_d.nrows()
    }
    pub fn m(&self) -> usize {
        self.b_d.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
    pub fn l(&self) -> usize {
        self.d.nrows()
    }

    /// Names of the rows of `x`.
    pub fn state_coordinates(&self) -> Vec<String> {
        self.states.coordinates()
    }

    /// Names of the rows of `u`.
    pub fn input_coordinates(&self) -> Vec<String> {
        self.inputs.coordinates()
    }

    /// Names of the rows of `z_x`.
    pub fn state_channel_coordinates(&self) -> Vec<String> {
        expand(&self.state_channels, self.states.width())
    }

    /// Names of the rows of `z_u`.
    pub fn input_channel_coordinates(&self) -> Vec<String> {
        expand(&self.input_channels, self.inputs.width())
    }

    /// `𝒪 = [[I, 0], [0, D], [C·A_d, C·B_d]]`.
    pub fn joint_design(&self) -> Mat {
        let (n, m, l, p) = (self.n(), self.m(), self.l(), self.p());
        let mut o = Mat::zeros(n + l + p, n + m);
        o.view_mut((0, 0), (n, n)).fill_with_identity();
        o.view_mut((n, n), (l, m)).copy_from(&self.d);
        o.view_mut((n + l, 0), (p, n)).copy_from(&(&self.c * &self.a_d));
        o.view_mut((n + l, n), (p, m)).copy_from(&(&self.c * &self.b_d));
        o
    }
}


/// Continuous assembly, ZOH discretization and measurement model in one go.
pub fn build_discrete(
    topology: &NetworkTopology,
    ts: f64,
    process: &ProcessNoise,
) -> Result<DiscreteModel, ModelError> {
    let cont = build_continuous(topology)?;
    discrete_from_continuous(topology, &cont, ts, process)
}

fn discrete_from_continuous(
    topology: &NetworkTopology,
    cont: &ContinuousModel,
    ts: f64,
    process: &ProcessNoise,
) -> Result<DiscreteModel, ModelError> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(ModelError::InvalidParameter {
            path: "ts".into(),
            message: format!("sampling period must be > 0, got {ts}"),
        });
    }
    let (a_d, b_d) = numerics::discretize_zoh(&cont.a, &cont.b, ts)?;
    let meas = build_measurement(topology, &cont.states, &cont.inputs)?;

    let mut q = Vector::zeros(cont.states.dim());
    for (k, id) in cont.states.ids().iter().enumerate() {
        let std = process.std_for(id).ok_or_else(|| ModelError::InvalidParameter {
            path: format!("process_noise.{id}"),
            message: "missing process noise".into(),
        })?;
        if !(std > 0.0 && std.is_finite()) {
            return Err(ModelError::InvalidParameter {
                path: format!("process_noise.{id}"),
                message: format!("must be > 0, got {std}"),
            });
        }
        q[2 * k] = std * std;
        q[2 * k + 1] = std * std;
    }

    Ok(DiscreteModel {
        a_d,
        b_d,
        c: meas.c,
        d: meas.d,
        q: Mat::from_diagonal(&q),
        r_x: meas.r_x,
        r_u: meas.r_u,
        ts,
        states: cont.states.clone(),
        inputs: cont.inputs.clone(),
        state_channels: meas.state_channels,
        input_channels: meas.input_channels,
    })
}

// ---------------------------------------------------------------------------
// Observability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub ok: bool,
    pub rank: usize,
    /// `n + m`.
    pub required: usize,
    pub deficiency: usize,
    /// Input coordinates with a component in the null space of `𝒪`.
    pub unobservable_inputs: Vec<String>,
}

/// Full-column-rank test of the joint design `𝒪`.
pub fn check_joint_rank(model: &DiscreteModel) -> RankReport {
    let o = model.joint_design();
    let (n, m) = (model.n(), model.m());
    let required = n + m;
    let (rank, tol) = numerics::numerical_rank(&o);
    let mut unobservable = Vec::new();
    if rank < required {
        let svd = o.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let coords = model.input_coordinates();
        let mut flagged = vec![false; m];
        // null space: right singular vectors with σ below tolerance, plus any
        // directions beyond the row count
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.resize(required, 0.0);
        let null_basis: Vec<Vector> = if o.nrows() >= required {
            (0..required)
                .filter(|&k| sv[k] <= tol)
                .map(|k| v_t.row(k).transpose())
                .collect()
        } else {
            // wide 𝒪 never happens (identity block), kept for completeness
            null_space_wide(&o, tol)
        };
        for v in &null_basis {
            for j in 0..m {
                if v[n + j].abs() > 1e-8 {
                    flagged[j] = true;
                }
            }
        }
        unobservable = coords
            .into_iter()
            .zip(flagged)
            .filter_map(|(c, f)| f.then_some(c))
            .collect();
    }
    RankReport {
        ok: rank == required,
        rank,
        required,
        deficiency: required - rank,
        unobservable_inputs: unobservable,
    }
}

fn null_space_wide(o: &Mat, tol: f64) -> Vec<Vector> {
    let gram = o.transpose() * o;
    let eig = gram.symmetric_eigen();
    (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k].max(0.0).sqrt() <= tol)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect()
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

/// Coordinates shared with one neighbor: `(local input row, neighbor input row)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMap {
    pub pairs: Vec<(usize, usize)>,
    /// Coordinate names, one per pair.
    pub coordinates: Vec<String>,
}

impl SelectionMap {
    /// The 0/1 matrix `T` with `T·u_local` = shared coordinates in pair order.
    pub fn local_selector(&self, local_dim: usize) -> Mat {
        let mut t = Mat::zeros(self.pairs.len(), local_dim);
        for (r, (local, _)) in self.pairs.iter().enumerate() {
            t[(r, *local)] = 1.0;
        }
        t
    }
}

/// One area's sub-network model.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaModel {
    pub area_id: String,
    pub topology: NetworkTopology,
    pub continuous: ContinuousModel,
    pub model: DiscreteModel,
    /// Neighbor area id → shared coordinates.
    pub shared: BTreeMap<String, SelectionMap>,
}

/// Area assignment of network elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub areas: BTreeMap<String, AreaSpec>,
}

impl Partition {
    /// The partition declared in the network document.
    pub fn from_topology(topology: &NetworkTopology) -> Self {
        Self {
            areas: topology.areas.clone(),
        }
    }

    /// Everything in one area named `all`.
    pub fn single(topology: &NetworkTopology) -> Self {
        let mut elements: Vec<String> = topology.lines.iter().map(|l| l.id.clone()).collect();
        elements.extend(topology.dgus.iter().map(|d| d.id.clone()));
        elements.extend(topology.loads.iter().map(|l| l.id.clone()));
        elements.extend(
            topology
                .buses
                .iter()
                .filter(|b| b.has_capacitor)
                .map(|b| b.id.clone()),
        );
        Self {
            areas: BTreeMap::from([(
                "all".to_string(),
                AreaSpec {
                    elements,
                    shared_buses: vec![],
                },
            )]),
        }
    }
}

/// Splits the network into per-area models joined by shared bus voltages.
pub fn partition(
    topology: &NetworkTopology,
    partition: &Partition,
    ts: f64,
    process: &ProcessNoise,
) -> Result<Vec<AreaModel>, ModelError> {
    if let Some(e) = topology.validate().into_iter().next() {
        return Err(e);
    }
    if partition.areas.is_empty() {
        return Err(ModelError::InvalidPartition {
            area: String::new(),
            message: "no areas declared".into(),
        });
    }

    // Owner of every line / dgu / load / capacitive bus.
    let mut owner: HashMap<String, String> = HashMap::new();
    let mut assign = |element: &str, area: &str| -> Result<(), ModelError> {
        match owner.get(element) {
            Some(prev) if prev != area => Err(ModelError::MultiplyAssigned {
                element: element.to_string(),
                first: prev.clone(),
                second: area.to_string(),
            }),
            _ => {
                owner.insert(element.to_string(), area.to_string());
                Ok(())
            }
        }
    };
    let known = |id: &str| {
        topology.buses.iter().any(|b| b.id == id)
            || topology.lines.iter().any(|l| l.id == id)
            || topology.dgus.iter().any(|d| d.id == id)
            || topology.loads.iter().any(|l| l.id == id)
    };
    for (area, spec) in &partition.areas {
        for e in &spec.elements {
            if !known(e) {
                return Err(ModelError::InvalidPartition {
                    area: area.clone(),
                    message: format!("unknown element `{e}`"),
                });
            }
            let is_plain_bus = topology.buses.iter().any(|b| b.id == *e) && !topology.is_capacitive(e);
            if !is_plain_bus {
                assign(e, area)?;
            }
            if let Some(d) = topology.dgus.iter().find(|d| d.id == *e) {
                assign(&d.at_bus, area)?;
            }
        }
    }
    let required = topology
        .lines
        .iter()
        .map(|l| &l.id)
        .chain(topology.dgus.iter().map(|d| &d.id))
        .chain(topology.loads.iter().map(|l| &l.id))
        .chain(
            topology
                .buses
                .iter()
                .filter(|b| topology.is_capacitive(&b.id))
                .map(|b| &b.id),
        );
    for id in required {
        if !owner.contains_key(id) {
            return Err(ModelError::UnassignedElement(id.clone()));
        }
    }

    // Elements that must sit with the owner of their capacitive bus.
    for load in &topology.loads {
        if topology.is_capacitive(&load.at_bus) && owner[&load.id] != owner[&load.at_bus] {
            return Err(ModelError::InvalidPartition {
                area: owner[&load.id].clone(),
                message: format!(
                    "load `{}` sits on capacitive bus `{}` owned by `{}`",
                    load.id, load.at_bus, owner[&load.at_bus]
                ),
            });
        }
    }
    // Which areas touch each non-capacitive bus through their lines / loads.
    let mut touching: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for l in &topology.lines {
        let area = owner[&l.id].as_str();
        for bus in [&l.from_bus, &l.to_bus] {
            if topology.is_capacitive(bus) {
                if owner[bus] != area {
                    return Err(ModelError::InvalidPartition {
                        area: area.to_string(),
                        message: format!(
                            "line `{}` ends on capacitive bus `{bus}` owned by `{}`; only buses without capacitance can be shared",
                            l.id, owner[bus]
                        ),
                    });
                }
            } else {
                touching.entry(bus.as_str()).or_default().insert(area);
            }
        }
    }
    for load in &topology.loads {
        if !topology.is_capacitive(&load.at_bus) {
            touching
                .entry(load.at_bus.as_str())
                .or_default()
                .insert(owner[&load.id].as_str());
        }
    }

    for (area, spec) in &partition.areas {
        for bus in &spec.shared_buses {
            let reject = |reason: &str| ModelError::NonAdjacentShare {
                area: area.clone(),
                bus: bus.clone(),
                reason: reason.to_string(),
            };
            if topology.bus(bus).is_none() {
                return Err(reject("unknown bus"));
            }
            if topology.is_capacitive(bus) {
                return Err(reject("bus voltage is a state (capacitor or DGU bus)"));
            }
            let areas = touching.get(bus.as_str()).cloned().unwrap_or_default();
            if !areas.contains(area.as_str()) {
                return Err(reject("the declaring area has no element at this bus"));
            }
            let partners = areas
                .iter()
                .filter(|&&a| a != area && partition.areas[a].shared_buses.contains(bus))
                .count();
            if partners == 0 {
                return Err(reject("no other adjacent area declares it"));
            }
        }
    }
    for (bus, areas) in &touching {
        if areas.len() > 1
            && areas
                .iter()
                .any(|a| !partition.areas[*a].shared_buses.iter().any(|b| b == bus))
        {
            return Err(ModelError::UndeclaredBoundary {
                bus: bus.to_string(),
                areas: areas.iter().map(|a| a.to_string()).collect(),
            });
        }
    }

    // Sub-networks, keeping document order so a one-area partition matches
    // the centralized model exactly.
    let mut out = Vec::new();
    for area in partition.areas.keys() {
        let mine = |id: &str| owner.get(id).is_some_and(|o| o == area);
        let lines: Vec<Line> = topology.lines.iter().filter(|l| mine(&l.id)).cloned().collect();
        let dgus: Vec<Dgu> = topology.dgus.iter().filter(|d| mine(&d.id)).cloned().collect();
        let loads: Vec<Load> = topology.loads.iter().filter(|l| mine(&l.id)).cloned().collect();
        let buses: Vec<Bus> = topology
            .buses
            .iter()
            .filter(|b| {
                mine(&b.id)
                    || lines.iter().any(|l| l.from_bus == b.id || l.to_bus == b.id)
                    || loads.iter().any(|l| l.at_bus == b.id)
            })
            .cloned()
            .collect();
        let mut sub = NetworkTopology {
            version: topology.version,
            omega_o: topology.omega_o,
            buses,
            lines,
            dgus,
            loads,
            sensors: vec![],
            areas: BTreeMap::new(),
        };
        let (states, inputs) = sub.variable_indices();
        sub.sensors = topology
            .sensors
            .iter()
            .filter(|s| states.pair(&s.target).is_some() || inputs.pair(&s.target).is_some())
            .cloned()
            .collect();
        if let Some(e) = sub.validate_local().into_iter().next() {
            return Err(ModelError::InvalidPartition {
                area: area.clone(),
                message: e.to_string(),
            });
        }
        let continuous = assemble(&sub);
        let model = discrete_from_continuous(&sub, &continuous, ts, process)?;
        out.push(AreaModel {
            area_id: area.clone(),
            topology: sub,
            continuous,
            model,
            shared: BTreeMap::new(),
        });
    }

    // Selection maps between every pair of areas declaring the same bus.
    let count = out.len();
    for i in 0..count {
        for j in 0..count {
            if i == j {
                continue;
            }
            let (ai, aj) = (&out[i].area_id, &out[j].area_id);
            let common: Vec<&String> = partition.areas[ai]
                .shared_buses
                .iter()
                .filter(|b| partition.areas[aj].shared_buses.contains(b))
                .collect();
            if common.is_empty() {
                continue;
            }
            let mut pairs = Vec::new();
            let mut coordinates = Vec::new();
            for bus in common {
                let id = format!("v:{bus}");
                let (li, lj) = (
                    out[i].model.inputs.pair(&id).expect("shared bus is a local input"),
                    out[j].model.inputs.pair(&id).expect("shared bus is a neighbor input"),
                );
                pairs.push((li, lj));
                pairs.push((li + 1, lj + 1));
                coordinates.push(format!("{id}.d"));
                coordinates.push(format!("{id}.q"));
            }
            let neighbor = aj.clone();
            out[i].shared.insert(neighbor, SelectionMap { pairs, coordinates });
        }
    }
    Ok(out)
}

impl fmt::Display for RankReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            write!(f, "joint design has full column rank {}", self.rank)
        } else {
            write!(
                f,
                "joint design rank {} < {} (deficiency {}); unobservable inputs: {}",
                self.rank,
                self.required,
                self.deficiency,
                self.unobservable_inputs.join(", ")
            )
        }
    }
}
