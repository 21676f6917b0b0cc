//! Metrics, CSV series and the JSON run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use dsie::model::NetworkTopology;
use dsie::sim::{Experiment, ResolvedAttack, Scenario, TruthTrajectory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pipeline::{MethodOutput, Rejection};

pub const REPORT_VERSION: u32 = 1;

/// Steps excluded from error and false-alarm statistics.
pub const WARMUP_STEPS: usize = 50;

/// Mean squared errors of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean of `error² / magnitude²` over state coordinates and steps.
    pub state_nmse: f64,
    pub input_nmse: f64,
    /// Same over states and inputs together.
    pub nmse: f64,
    /// Raw MSE per variable id, averaged over its two axes.
    pub per_variable: BTreeMap<String, f64>,
    pub samples: usize,
}

pub fn compute_metrics(exp: &Experiment, truth: &TruthTrajectory, out: &MethodOutput, warmup: usize) -> Metrics {
    let model = &exp.filter_model;
    let mut per_coord_x = vec![(0.0, 0usize); model.n()];
    let mut per_coord_u = vec![(0.0, 0usize); model.m()];
    let accumulate = |acc: &mut [(f64, usize)], est: &[Option<dsie::Vector>], truth: &[dsie::Vector]| {
        for k in warmup..est.len() {
            if let Some(e) = &est[k] {
                for (i, a) in acc.iter_mut().enumerate() {
                    a.0 += (e[i] - truth[k][i]).powi(2);
                    a.1 += 1;
                }
            }
        }
    };
    accumulate(&mut per_coord_x, &out.x, &truth.x);
    accumulate(&mut per_coord_u, &out.u, &truth.u);

    let mean = |a: &(f64, usize)| if a.1 == 0 { 0.0 } else { a.0 / a.1 as f64 };
    let normalized = |acc: &[(f64, usize)], mags: &dsie::Vector| {
        let (s, c) = acc
            .iter()
            .zip(mags.iter())
            .filter(|(a, _)| a.1 > 0)
            .fold((0.0, 0usize), |(s, c), (a, m)| (s + mean(a) / (m * m), c + 1));
        (s, c)
    };
    let (sx, cx) = normalized(&per_coord_x, &exp.nominal.x_magnitude);
    let (su, cu) = normalized(&per_coord_u, &exp.nominal.u_magnitude);
    let ratio = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };

    let mut per_variable = BTreeMap::new();
    for (index, acc) in [(&model.states, &per_coord_x), (&model.inputs, &per_coord_u)] {
        for id in index.ids() {
            let p = index.pair(id).expect("id from index");
            per_variable.insert(id.clone(), 0.5 * (mean(&acc[p]) + mean(&acc[p + 1])));
        }
    }
    Metrics {
        state_nmse: ratio(sx, cx),
        input_nmse: ratio(su, cu),
        nmse: ratio(sx + su, cx + cu),
        per_variable,
        samples: per_coord_x.first().map_or(0, |a| a.1),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionStats {
    /// Alarms per step outside attack windows, after warm-up.
    pub false_alarm_rate: f64,
    pub false_alarms: usize,
    pub nominal_steps: usize,
    /// Steps from each attack onset to the first alarm; `None` when missed.
    pub detection_latency: Vec<Option<usize>>,
}

pub fn detection_stats(out: &MethodOutput, attacks: &[ResolvedAttack], warmup: usize) -> DetectionStats {
    let len = out.x.len();
    let attacked = |k: usize| attacks.iter().any(|a| k >= a.start && k < a.end);
    let scored: Vec<usize> = (warmup..len)
        .filter(|&k| !attacked(k) && out.distance.values().any(|s| s[k].is_some()))
        .collect();
    let false_alarms = out.alarms.iter().filter(|&&k| k >= warmup && !attacked(k)).count();
    let detection_latency = attacks
        .iter()
        .map(|a| out.alarms.iter().find(|&&k| k >= a.start).map(|k| k - a.start))
        .collect();
    DetectionStats {
        false_alarm_rate: if scored.is_empty() {
            0.0
        } else {
            false_alarms as f64 / scored.len() as f64
        },
        false_alarms,
        nominal_steps: scored.len(),
        detection_latency,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    /// Averaged over replicates.
    pub metrics: Metrics,
    pub nmse_per_replicate: Vec<f64>,
    /// Averaged over replicates; latencies from replicate 0.
    pub detection: DetectionStats,
    /// Alarm times of replicate 0.
    pub alarms: Vec<f64>,
    /// Distance series of replicate 0, by label.
    pub mahalanobis: BTreeMap<String, Vec<Option<f64>>>,
    /// `None` marks a detector with no redundancy (never fires).
    pub thresholds: BTreeMap<String, Option<f64>>,
    pub rejections: Vec<Rejection>,
    pub transport_errors: usize,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub scenario_hash: String,
    pub seed: u64,
    pub replicates: u64,
    pub steps: usize,
    pub warmup: usize,
    pub config: Scenario,
    pub methods: BTreeMap<String, MethodReport>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl MethodReport {
    pub fn from_replicates(
        runs: &[(Metrics, DetectionStats)],
        first: &MethodOutput,
        times: &[f64],
        total_ms: f64,
    ) -> Self {
        let r = runs.len().max(1) as f64;
        let mut metrics = Metrics::default();
        for (m, _) in runs {
            metrics.state_nmse += m.state_nmse / r;
            metrics.input_nmse += m.input_nmse / r;
            metrics.nmse += m.nmse / r;
            metrics.samples += m.samples;
            for (k, v) in &m.per_variable {
                *metrics.per_variable.entry(k.clone()).or_insert(0.0) += v / r;
            }
        }
        let mut detection = runs.first().map(|(_, d)| d.clone()).unwrap_or_default();
        detection.false_alarms = runs.iter().map(|(_, d)| d.false_alarms).sum();
        detection.nominal_steps = runs.iter().map(|(_, d)| d.nominal_steps).sum();
        detection.false_alarm_rate = if detection.nominal_steps == 0 {
            0.0
        } else {
            detection.false_alarms as f64 / detection.nominal_steps as f64
        };
        Self {
            metrics,
            nmse_per_replicate: runs.iter().map(|(m, _)| m.nmse).collect(),
            detection,
            alarms: first.alarms.iter().map(|&k| times[k]).collect(),
            mahalanobis: first.distance.clone(),
            thresholds: first.threshold.iter().map(|(k, v)| (k.clone(), finite(*v))).collect(),
            rejections: first.rejections.clone(),
            transport_errors: first.transport_errors,
            timing_ms: total_ms,
        }
    }
}

/// SHA-256 over the scenario (seed, network path and method list cleared)
/// and the network content.
pub fn scenario_hash(scenario: &Scenario, network: &NetworkTopology) -> String {
    let mut canonical = scenario.clone();
    canonical.seed = 0;
    canonical.network.clear();
    canonical.methods.clear();
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&canonical).expect("scenario serializes").as_bytes());
    h.update(b"\n");
    h.update(serde_json::to_string(network).expect("network serializes").as_bytes());
    hex::encode(h.finalize())
}

fn fmt_time(t: f64) -> String {
    let mut s = format!("{t:.9}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.push('0');
    }
    s
}

/// Long-format `time,variable,value` rows for state and input series.
pub fn write_series_csv(
    w: &mut impl Write,
    times: &[f64],
    state_names: &[String],
    input_names: &[String],
    x: &[Option<dsie::Vector>],
    u: &[Option<dsie::Vector>],
) -> io::Result<()> {
    writeln!(w, "time,variable,value")?;
    let mut line = String::new();
    for (k, t) in times.iter().enumerate() {
        let t = fmt_time(*t);
        for (names, series) in [(state_names, x), (input_names, u)] {
            if let Some(v) = &series[k] {
                for (name, value) in names.iter().zip(v.iter()) {
                    line.clear();
                    let _ = write!(line, "{t},{name},{value}");
                    writeln!(w, "{line}")?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_distance_csv(w: &mut impl Write, times: &[f64], series: &BTreeMap<String, Vec<Option<f64>>>) -> io::Result<()> {
    writeln!(w, "time,variable,value")?;
    for (k, t) in times.iter().enumerate() {
        let t = fmt_time(*t);
        for (label, s) in series {
            if let Some(v) = s[k] {
                writeln!(w, "{t},{label},{v}")?;
            }
        }
    }
    Ok(())
}
