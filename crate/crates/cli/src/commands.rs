//! `validate`, `run` and `compare`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use dsie::model::{self, NetworkTopology, Partition};
use dsie::sim::{Experiment, Method, PartitionChoice, Scenario};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pipeline::{self, MethodOutput, RunOptions};
use crate::report::{self, DetectionStats, MethodReport, Metrics, RunReport, REPORT_VERSION, WARMUP_STEPS};

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Validation = 2,
    Runtime = 3,
    Io = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn validation(e: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ExitKind::Validation,
            error: e.into(),
        }
    }
    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ExitKind::Runtime,
            error: e.into(),
        }
    }
    pub fn io(e: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ExitKind::Io,
            error: e.into(),
        }
    }
    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(anyhow!("{}: {e}", path.display())))
}

pub fn load_network(path: &Path) -> Result<NetworkTopology, Failure> {
    NetworkTopology::from_json_str(&read(path)?).map_err(|e| Failure::validation(anyhow!("{}: {e}", path.display())))
}

pub fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    Scenario::from_json_str(&read(path)?).map_err(|e| Failure::validation(anyhow!("{}: {e}", path.display())))
}

/// Network path named by a scenario, resolved against the scenario's folder.
pub fn scenario_network_path(scenario_path: &Path, scenario: &Scenario) -> PathBuf {
    let p = Path::new(&scenario.network);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        scenario_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// A scenario with every default, for checking a network on its own.
pub fn default_scenario() -> Scenario {
    Scenario::from_json_str(r#"{"network": "", "duration": 1.0}"#).expect("default scenario parses")
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub source: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub area: String,
    pub ok: bool,
    pub rank: usize,
    pub required: usize,
    pub unobservable_inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub ok: bool,
    pub diagnostics: Vec<Diagnostic>,
    pub rank: Vec<RankEntry>,
}

/// Checks a network (and optionally a scenario) and the joint rank
/// condition of the whole model and of every area.
pub fn validate(network: &NetworkTopology, scenario: Option<&Scenario>) -> Validation {
    let mut diagnostics: Vec<Diagnostic> = network
        .validate()
        .into_iter()
        .map(|e| Diagnostic {
            source: "network".into(),
            message: e.to_string(),
        })
        .collect();
    if let Some(s) = scenario {
        diagnostics.extend(s.validate().into_iter().map(|e| Diagnostic {
            source: "scenario".into(),
            message: e.to_string(),
        }));
    }
    let mut rank = Vec::new();
    if diagnostics.is_empty() {
        let scenario = scenario.cloned().unwrap_or_else(default_scenario);
        match Experiment::new(scenario.clone(), network.clone()) {
            Err(e) => diagnostics.push(Diagnostic {
                source: "model".into(),
                message: e.to_string(),
            }),
            Ok(exp) => {
                rank.push(rank_entry("all", &exp.filter_model));
                let part = match scenario.partition {
                    PartitionChoice::Network if !network.areas.is_empty() => Some(Partition::from_topology(network)),
                    PartitionChoice::Network => None,
                    PartitionChoice::Single => Some(Partition::single(network)),
                };
                if let Some(part) = part {
                    match model::partition(&exp.filter_topology, &part, scenario.ts, &exp.filter_process) {
                        Ok(areas) => rank.extend(areas.iter().map(|a| rank_entry(&a.area_id, &a.model))),
                        Err(e) => diagnostics.push(Diagnostic {
                            source: "partition".into(),
                            message: e.to_string(),
                        }),
                    }
                }
            }
        }
    }
    for r in rank.iter().filter(|r| !r.ok) {
        diagnostics.push(Diagnostic {
            source: "rank".into(),
            message: format!(
                "area `{}`: joint design has rank {} < {}; unobservable inputs: {}",
                r.area,
                r.rank,
                r.required,
                r.unobservable_inputs.join(", ")
            ),
        });
    }
    Validation {
        ok: diagnostics.is_empty(),
        diagnostics,
        rank,
    }
}

fn rank_entry(area: &str, m: &model::DiscreteModel) -> RankEntry {
    let r = model::check_joint_rank(m);
    RankEntry {
        area: area.to_string(),
        ok: r.ok,
        rank: r.rank,
        required: r.required,
        unobservable_inputs: r.unobservable_inputs,
    }
}

pub fn cmd_validate(network: Option<&Path>, scenario: Option<&Path>) -> Result<Validation, Failure> {
    let scenario_doc = scenario.map(load_scenario).transpose()?;
    let network_path = match (network, scenario, &scenario_doc) {
        (Some(n), _, _) => n.to_path_buf(),
        (None, Some(path), Some(doc)) => scenario_network_path(path, doc),
        _ => return Err(Failure::validation(anyhow!("either --network or --scenario is required"))),
    };
    let topology = load_network(&network_path)?;
    Ok(validate(&topology, scenario_doc.as_ref()))
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub scenario: PathBuf,
    pub network: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub replicates: u64,
    pub methods: Vec<Method>,
}

/// Scenario with command-line overrides applied, bound to its network.
pub fn prepare(args: &RunArgs) -> Result<Experiment, Failure> {
    let mut scenario = load_scenario(&args.scenario)?;
    let network_path = args
        .network
        .clone()
        .unwrap_or_else(|| scenario_network_path(&args.scenario, &scenario));
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if !args.methods.is_empty() {
        scenario.methods = args.methods.clone();
    }
    let topology = load_network(&network_path)?;
    let check = validate(&topology, Some(&scenario));
    if !check.ok {
        let lines: Vec<String> = check
            .diagnostics
            .iter()
            .map(|d| format!("{}: {}", d.source, d.message))
            .collect();
        return Err(Failure::validation(anyhow!("validation failed:\n  {}", lines.join("\n  "))));
    }
    Experiment::new(scenario, topology).map_err(Failure::validation)
}

/// Runs every method on every replicate and writes the outputs of
/// replicate 0 plus `report.json`.
pub fn cmd_run(args: &RunArgs) -> Result<RunReport, Failure> {
    let exp = prepare(args)?;
    let replicates = args.replicates.max(1);
    let methods = exp.scenario.methods.clone();
    info!(
        "running {} steps x {} replicates for {:?}",
        exp.steps(),
        replicates,
        methods
    );
    let attacks = exp.resolve_attacks().map_err(Failure::validation)?;

    type ReplicateOut = (dsie::sim::TruthTrajectory, Vec<(MethodOutput, Metrics, DetectionStats)>);
    let runs: Vec<ReplicateOut> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let (truth, streams) = exp.replicate(r).map_err(Failure::runtime)?;
            let mut per_method = Vec::with_capacity(methods.len());
            for &m in &methods {
                let out = pipeline::run_method(&exp, m, &truth, &streams, r, RunOptions::default())
                    .map_err(|e| Failure::runtime(e.context(format!("replicate {r}"))))?;
                let metrics = report::compute_metrics(&exp, &truth, &out, WARMUP_STEPS);
                let det = report::detection_stats(&out, &attacks, WARMUP_STEPS);
                per_method.push((out, metrics, det));
            }
            Ok((truth, per_method))
        })
        .collect::<Result<_, Failure>>()?;

    fs::create_dir_all(&args.out).map_err(|e| Failure::io(anyhow!("{}: {e}", args.out.display())))?;
    let (truth0, outputs0) = &runs[0];
    let states = exp.filter_model.state_coordinates();
    let inputs = exp.filter_model.input_coordinates();
    let truth_x: Vec<_> = truth0.x.iter().cloned().map(Some).collect();
    let truth_u: Vec<_> = truth0.u.iter().cloned().map(Some).collect();
    write_file(&args.out.join("truth.csv"), |w| {
        report::write_series_csv(w, &truth0.times, &states, &inputs, &truth_x, &truth_u)
    })?;

    let mut method_reports = BTreeMap::new();
    for (i, &m) in methods.iter().enumerate() {
        let (out, _, _) = &outputs0[i];
        write_file(&args.out.join(format!("estimates_{}.csv", m.name())), |w| {
            report::write_series_csv(w, &truth0.times, &states, &inputs, &out.x, &out.u)
        })?;
        write_file(&args.out.join(format!("mahalanobis_{}.csv", m.name())), |w| {
            report::write_distance_csv(w, &truth0.times, &out.distance)
        })?;
        let stats: Vec<(Metrics, DetectionStats)> =
            runs.iter().map(|(_, pm)| (pm[i].1.clone(), pm[i].2.clone())).collect();
        let total_ms: f64 = runs.iter().map(|(_, pm)| pm[i].0.elapsed_ms).sum();
        method_reports.insert(
            m.name().to_string(),
            MethodReport::from_replicates(&stats, out, &truth0.times, total_ms),
        );
    }

    let report = RunReport {
        version: REPORT_VERSION,
        scenario_hash: report::scenario_hash(&exp.scenario, &exp.topology),
        seed: exp.scenario.seed,
        replicates,
        steps: exp.steps(),
        warmup: WARMUP_STEPS,
        config: exp.scenario.clone(),
        methods: method_reports,
    };
    write_file(&args.out.join("report.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(std::io::Error::other)?;
        writeln!(w)
    })?;
    Ok(report)
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Failure> {
    let wrap = |e: std::io::Error| Failure::io(anyhow!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    body(&mut w).map_err(wrap)?;
    w.flush().map_err(wrap)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub method: String,
    pub nmse: f64,
    /// This method's NMSE over the same method in the first run.
    pub ratio_to_first_run: Option<f64>,
    /// This method's NMSE over the reference method in the same run.
    pub ratio_to_reference: Option<f64>,
    pub false_alarm_rate: f64,
    pub detection_latency: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub scenario_hash: String,
    pub reference_method: String,
    pub rows: Vec<CompareRow>,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    if a == b {
        Some(1.0)
    } else if b > 0.0 {
        Some(a / b)
    } else {
        None
    }
}

pub fn cmd_compare(dirs: &[PathBuf]) -> Result<CompareSummary, Failure> {
    if dirs.is_empty() {
        return Err(Failure::validation(anyhow!("no report directories given")));
    }
    let mut reports = Vec::new();
    for d in dirs {
        let path = d.join("report.json");
        let text = read(&path)?;
        let r: RunReport =
            serde_json::from_str(&text).map_err(|e| Failure::validation(anyhow!("{}: {e}", path.display())))?;
        reports.push((d.display().to_string(), r));
    }
    let hash = reports[0].1.scenario_hash.clone();
    if let Some((dir, _)) = reports.iter().find(|(_, r)| r.scenario_hash != hash) {
        return Err(Failure::validation(anyhow!(
            "IncompatibleRuns: `{dir}` was produced from a different scenario than `{}`",
            reports[0].0
        )));
    }
    let reference = if reports[0].1.methods.contains_key(Method::Dsie.name()) {
        Method::Dsie.name().to_string()
    } else {
        reports[0].1.methods.keys().next().cloned().unwrap_or_default()
    };
    let first = &reports[0].1;
    let mut rows = Vec::new();
    for (dir, r) in &reports {
        for (name, m) in &r.methods {
            rows.push(CompareRow {
                run: dir.clone(),
                method: name.clone(),
                nmse: m.metrics.nmse,
                ratio_to_first_run: first.methods.get(name).and_then(|f| ratio(m.metrics.nmse, f.metrics.nmse)),
                ratio_to_reference: r.methods.get(&reference).and_then(|f| ratio(m.metrics.nmse, f.metrics.nmse)),
                false_alarm_rate: m.detection.false_alarm_rate,
                detection_latency: m.detection.detection_latency.clone(),
            });
        }
    }
    Ok(CompareSummary {
        scenario_hash: hash,
        reference_method: reference,
        rows,
    })
}

impl fmt::Display for CompareSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "scenario {}", &self.scenario_hash[..12.min(self.scenario_hash.len())])?;
        writeln!(
            f,
            "{:<24} {:<18} {:>12} {:>10} {:>10} {:>10}  latency",
            "run",
            "method",
            "nmse",
            "vs first",
            format!("vs {}", self.reference_method),
            "false al."
        )?;
        for r in &self.rows {
            let latency: Vec<String> = r
                .detection_latency
                .iter()
                .map(|l| l.map_or("missed".to_string(), |v| v.to_string()))
                .collect();
            writeln!(
                f,
                "{:<24} {:<18} {:>12.4e} {:>10} {:>10} {:>10.4}  {}",
                r.run,
                r.method,
                r.nmse,
                opt(r.ratio_to_first_run),
                opt(r.ratio_to_reference),
                r.false_alarm_rate,
                latency.join(",")
            )?;
        }
        Ok(())
    }
}
