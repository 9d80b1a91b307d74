//! Experiment configuration and drivers: single runs, the size and QSF
//! sweeps, and the benchmark suite.
//!
//! Every sweep point is an independent simulation. With the `parallel`
//! feature the points run on the rayon pool; results are always collected in
//! input order, so output is identical either way.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{gen_ghz, gen_graphstate, gen_qft, gen_random_circuit, parse_circuit, ring_edges, CircuitError, LogicalCircuit};
use crate::compiler::{build_program, CompileError, CompileOptions, Program};
use crate::metrics::{breakdown, coherence_improvement, mean_report, report_csv, speedup_ns, BreakdownReport, DEFAULT_T2_NS};
use crate::mac::{CtService, IdleToken};
use crate::system::{run_program, EprConfig, MacConfig, MacMode, SimConfig, SimError, TimingConfig, Trace};

pub const DEFAULT_SIZES: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 100];
pub const DEFAULT_QSFS: [f64; 4] = [1.0, 0.5, 0.25, 0.125];
pub const BENCHMARK_NAMES: [&str; 4] = ["ghz", "qft", "graphstate", "random"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub n_qc: usize,
    pub slots_per_qc: usize,
    pub to_bits: u32,
    /// Extra teleport landing slots per core; `null` means unbounded.
    pub overflow_slots: Option<usize>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_qc: 2,
            slots_per_qc: 16,
            to_bits: 8,
            overflow_slots: None,
        }
    }
}

impl SystemConfig {
    fn compile_options(&self) -> CompileOptions {
        CompileOptions {
            overflow_slots: self.overflow_slots,
            to_bits: self.to_bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum Workload {
    Ghz { qubits: usize },
    Qft { qubits: usize },
    /// Graph state on a ring of `qubits` vertices.
    Graphstate { qubits: usize },
    Random {
        qubits: usize,
        gates: usize,
        #[serde(default = "default_two_qubit_fraction")]
        two_qubit_fraction: f64,
    },
    File { path: PathBuf },
}

fn default_two_qubit_fraction() -> f64 {
    0.5
}

impl Default for Workload {
    fn default() -> Self {
        Workload::Ghz { qubits: 4 }
    }
}

impl Workload {
    /// Builds the circuit. Only the random generator uses `seed`.
    pub fn build(&self, seed: u64) -> Result<LogicalCircuit, ExperimentError> {
        Ok(match self {
            Workload::Ghz { qubits } => gen_ghz(*qubits)?,
            Workload::Qft { qubits } => gen_qft(*qubits)?,
            Workload::Graphstate { qubits } => gen_graphstate(&ring_edges(*qubits), *qubits)?,
            Workload::Random {
                qubits,
                gates,
                two_qubit_fraction,
            } => gen_random_circuit(*qubits, *gates, *two_qubit_fraction, seed)?,
            Workload::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
                    path: path.clone(),
                    source,
                })?;
                parse_circuit(&text)?
            }
        })
    }

    pub fn benchmark(name: &str, qubits: usize, random_gates: usize, two_qubit_fraction: f64) -> Option<Workload> {
        Some(match name {
            "ghz" => Workload::Ghz { qubits },
            "qft" => Workload::Qft { qubits },
            "graphstate" => Workload::Graphstate { qubits },
            "random" => Workload::Random {
                qubits,
                gates: random_gates,
                two_qubit_fraction,
            },
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    /// Sweep every size from 1 to 100 instead of `sizes`.
    pub full_grid: bool,
    pub qsfs: Vec<f64>,
    pub qubits_per_qc: usize,
    pub gates_per_qc: usize,
    pub two_qubit_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sizes: DEFAULT_SIZES.to_vec(),
            full_grid: false,
            qsfs: DEFAULT_QSFS.to_vec(),
            qubits_per_qc: 16,
            gates_per_qc: 160,
            two_qubit_fraction: 0.5,
        }
    }
}

impl SweepConfig {
    pub fn grid(&self) -> Vec<usize> {
        if self.full_grid {
            (1..=100).collect()
        } else {
            self.sizes.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub names: Vec<String>,
    pub n_qc: usize,
    pub slots_per_qc: usize,
    pub qubits: usize,
    pub random_gates: usize,
    pub random_two_qubit_fraction: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            names: BENCHMARK_NAMES.iter().map(|s| s.to_string()).collect(),
            n_qc: 4,
            slots_per_qc: 9,
            qubits: 25,
            random_gates: 250,
            random_two_qubit_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub report: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub timing: TimingConfig,
    pub epr: EprConfig,
    pub mac: MacConfig,
    pub system: SystemConfig,
    pub workload: Workload,
    pub modes: Vec<MacMode>,
    pub seeds: Vec<u64>,
    pub sweep: SweepConfig,
    pub benchmarks: BenchmarkConfig,
    pub t2_ns: f64,
    pub parallel: bool,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            timing: TimingConfig::default(),
            epr: EprConfig::default(),
            mac: MacConfig::default(),
            system: SystemConfig::default(),
            workload: Workload::default(),
            modes: MacMode::BOTH.to_vec(),
            seeds: (1..=5).collect(),
            sweep: SweepConfig::default(),
            benchmarks: BenchmarkConfig::default(),
            t2_ns: DEFAULT_T2_NS,
            parallel: true,
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| ExperimentError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |path: &str, message: String| {
            Err(ExperimentError::Config {
                path: path.to_string(),
                message,
            })
        };
        if let Err(e) = self.timing.validate() {
            return bad("timing", e.to_string());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        if self.modes.is_empty() {
            return bad("modes", "at least one mode is required".into());
        }
        if self.epr.parallel_capacity == Some(0) {
            return bad("epr.parallel_capacity", "must be >= 1".into());
        }
        if self.system.n_qc == 0 || self.system.slots_per_qc == 0 {
            return bad("system", "n_qc and slots_per_qc must be >= 1".into());
        }
        if let Workload::File { path } = &self.workload {
            if !path.is_file() {
                return bad("workload.path", format!("{} does not exist", path.display()));
            }
        }
        if self.sweep.qsfs.iter().any(|&q| !(q.is_finite() && q > 0.0)) {
            return bad("sweep.qsfs", "every qsf must be > 0".into());
        }
        if self.sweep.sizes.contains(&0) {
            return bad("sweep.sizes", "sizes must be >= 1".into());
        }
        if self.t2_ns.is_nan() || self.t2_ns <= 0.0 {
            return bad("t2_ns", "must be > 0".into());
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            timing: self.timing,
            epr: self.epr,
            mac: self.mac,
        }
    }

    fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    /// Modes in canonical order (CT before ID), deduplicated.
    fn modes(&self) -> Vec<MacMode> {
        let mut m = self.modes.clone();
        m.sort();
        m.dedup();
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    Parallel,
}

/// Maps `f` over `items`, preserving order.
pub fn map_points<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

pub fn simulate(program: &Program, cfg: &SimConfig, mode: MacMode, seed: u64) -> Result<(BreakdownReport, Trace), ExperimentError> {
    let trace = run_program(program, cfg, mode, seed)?;
    Ok((breakdown(&trace), trace))
}

/// Output of `cmd_run`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<BreakdownReport>,
    /// One trace per `(mode, seed)`, when requested.
    pub traces: Vec<Trace>,
}

impl RunOutput {
    pub fn csv(&self) -> String {
        report_csv(&self.reports)
    }
}

pub fn cmd_run(cfg: &ExperimentConfig, keep_traces: bool) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let sim = cfg.sim_config();
    let jobs: Vec<(MacMode, u64)> = cfg
        .modes()
        .into_iter()
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = map_points(&jobs, cfg.execution(), |&(mode, seed)| {
        let circuit = cfg.workload.build(seed)?;
        let program = build_program(&circuit, cfg.system.n_qc, cfg.system.slots_per_qc, &cfg.system.compile_options())?;
        simulate(&program, &sim, mode, seed)
    });
    let mut out = RunOutput {
        reports: Vec::new(),
        traces: Vec::new(),
    };
    for r in results {
        let (report, trace) = r?;
        out.reports.push(report);
        if keep_traces {
            out.traces.push(trace);
        }
    }
    Ok(out)
}

/// Per-seed and seed-averaged reports of a sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub per_seed: Vec<BreakdownReport>,
    pub means: Vec<BreakdownReport>,
}

impl SweepResult {
    pub fn mean(&self, n_qc: usize, qsf: f64, mode: MacMode) -> Option<&BreakdownReport> {
        self.means.iter().find(|r| r.n_qc == n_qc && r.qsf == qsf && r.mode == mode)
    }

    /// Per-seed rows followed by the mean row of each `(qsf, n_qc, mode)`.
    pub fn csv(&self) -> String {
        let mut rows = Vec::with_capacity(self.per_seed.len() + self.means.len());
        for m in &self.means {
            rows.extend(
                self.per_seed
                    .iter()
                    .filter(|r| r.n_qc == m.n_qc && r.qsf == m.qsf && r.mode == m.mode),
            );
            rows.push(m);
        }
        let owned: Vec<BreakdownReport> = rows.into_iter().copied().collect();
        report_csv(&owned)
    }
}

/// Random workload used by the sweeps: `qubits_per_qc * n` qubits and
/// `gates_per_qc * n` gates.
pub fn sweep_program(sweep: &SweepConfig, system: &SystemConfig, n_qc: usize, seed: u64) -> Result<Program, ExperimentError> {
    let circuit = gen_random_circuit(
        sweep.qubits_per_qc * n_qc,
        sweep.gates_per_qc * n_qc,
        sweep.two_qubit_fraction,
        seed,
    )?;
    Ok(build_program(&circuit, n_qc, system.slots_per_qc, &system.compile_options())?)
}

fn run_sweep(cfg: &ExperimentConfig, qsfs: &[f64]) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    let modes = cfg.modes();
    let sizes = cfg.sweep.grid();
    let jobs: Vec<(usize, u64)> = sizes.iter().flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s))).collect();
    let base = cfg.sim_config();
    // one program per (n, seed), simulated under every qsf and mode
    let results = map_points(&jobs, cfg.execution(), |&(n, seed)| {
        let program = sweep_program(&cfg.sweep, &cfg.system, n, seed)?;
        let mut reports = Vec::with_capacity(qsfs.len() * modes.len());
        for &qsf in qsfs {
            let mut sim = base;
            sim.timing.qsf = qsf;
            for &mode in &modes {
                reports.push(breakdown(&run_program(&program, &sim, mode, seed)?));
            }
        }
        Ok::<_, ExperimentError>(reports)
    });
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    let mut out = SweepResult::default();
    for &qsf in qsfs {
        for &n in &sizes {
            for &mode in &modes {
                let group: Vec<BreakdownReport> = all
                    .iter()
                    .filter(|r| r.n_qc == n && r.qsf == qsf && r.mode == mode)
                    .copied()
                    .collect();
                out.per_seed.extend(group.iter().copied());
                out.means.extend(mean_report(&group));
            }
        }
    }
    Ok(out)
}

pub fn cmd_sweep_size(cfg: &ExperimentConfig) -> Result<SweepResult, ExperimentError> {
    run_sweep(cfg, &[cfg.timing.qsf])
}

pub fn cmd_sweep_qsf(cfg: &ExperimentConfig) -> Result<SweepResult, ExperimentError> {
    run_sweep(cfg, &cfg.sweep.qsfs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub name: String,
    pub n_qc: usize,
    pub slots_per_qc: usize,
    pub qubits: usize,
    pub gates: usize,
    pub teleports: usize,
    pub ct_makespan: f64,
    pub id_makespan: f64,
    pub improvement_pct: f64,
    pub coherence_improvement_pct: f64,
}

pub const BENCHMARK_HEADER: &str = "benchmark,n_qc,slots_per_qc,qubits,gates,teleports,ct_makespan_ns,id_makespan_ns,improvement_pct,coherence_improvement_pct";

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::from(BENCHMARK_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.n_qc,
            r.slots_per_qc,
            r.qubits,
            r.gates,
            r.teleports,
            r.ct_makespan,
            r.id_makespan,
            r.improvement_pct,
            r.coherence_improvement_pct
        );
    }
    out
}

/// CT vs ID on the benchmark suite, makespans averaged over seeds.
pub fn cmd_benchmarks(cfg: &ExperimentConfig) -> Result<Vec<BenchmarkRow>, ExperimentError> {
    cfg.validate()?;
    let b = &cfg.benchmarks;
    let sim = cfg.sim_config();
    let system = SystemConfig {
        n_qc: b.n_qc,
        slots_per_qc: b.slots_per_qc,
        ..cfg.system
    };
    let mut jobs = Vec::new();
    for name in &b.names {
        let workload = Workload::benchmark(name, b.qubits, b.random_gates, b.random_two_qubit_fraction)
            .ok_or_else(|| ExperimentError::Invalid(format!("unknown benchmark `{name}`")))?;
        for &seed in &cfg.seeds {
            jobs.push((name.clone(), workload.clone(), seed));
        }
    }
    let results = map_points(&jobs, cfg.execution(), |(_, workload, seed)| {
        let circuit = workload.build(*seed)?;
        let program = build_program(&circuit, system.n_qc, system.slots_per_qc, &system.compile_options())?;
        let ct = run_program(&program, &sim, MacMode::Ct, *seed)?.makespan;
        let id = run_program(&program, &sim, MacMode::Id, *seed)?.makespan;
        Ok::<_, ExperimentError>((circuit.gates.len(), program.teleport_count(), ct, id))
    });
    let mut rows = Vec::new();
    let mut it = results.into_iter();
    for name in &b.names {
        let mut runs = Vec::new();
        for _ in &cfg.seeds {
            runs.push(it.next().expect("one result per job")?);
        }
        let k = runs.len() as f64;
        let ct = runs.iter().map(|r| r.2).sum::<f64>() / k;
        let id = runs.iter().map(|r| r.3).sum::<f64>() / k;
        rows.push(BenchmarkRow {
            name: name.clone(),
            n_qc: system.n_qc,
            slots_per_qc: system.slots_per_qc,
            qubits: b.qubits,
            gates: runs[0].0,
            teleports: runs[0].1,
            ct_makespan: ct,
            id_makespan: id,
            improvement_pct: speedup_ns(ct, id),
            coherence_improvement_pct: coherence_improvement(ct, id, cfg.t2_ns),
        });
    }
    Ok(rows)
}

/// Per-size CT-vs-ID comparison derived from a sweep's mean rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MacComparison {
    pub n_qc: usize,
    pub qsf: f64,
    pub speedup_pct: f64,
    /// ID c_comm over CT c_comm.
    pub c_comm_ratio: f64,
}

pub fn compare_modes(sweep: &SweepResult) -> Vec<MacComparison> {
    sweep
        .means
        .iter()
        .filter(|r| r.mode == MacMode::Ct)
        .filter_map(|ct| {
            let id = sweep.mean(ct.n_qc, ct.qsf, MacMode::Id)?;
            Some(MacComparison {
                n_qc: ct.n_qc,
                qsf: ct.qsf,
                speedup_pct: speedup_ns(ct.makespan, id.makespan),
                c_comm_ratio: if ct.c_comm > 0.0 { id.c_comm / ct.c_comm } else { 0.0 },
            })
        })
        .collect()
}

/// Config echo and tool version written next to every output.
pub fn manifest_json(command: &str, cfg: &ExperimentConfig, outputs: &[PathBuf]) -> String {
    let value = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
        "outputs": outputs,
    });
    serde_json::to_string_pretty(&value).expect("manifest serializes")
}

/// Settings for a CT sensitivity run: one packet per token visit and an
/// unbounded EPR generator.
pub fn sensitivity_variant(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.mac.ct_service = CtService::OnePacket;
    c.mac.ct_idle = IdleToken::Circulate;
    c.epr.parallel_capacity = None;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_object() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.seeds.len(), 5);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = ExperimentConfig::from_json(r#"{"timing": {"gate_3q": 5}}"#).unwrap_err();
        match err {
            ExperimentError::Config { path, message } => {
                assert_eq!(path, "timing.gate_3q");
                assert!(message.contains("gate_3q"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
        let err = ExperimentConfig::from_json(r#"{"system": {"n_qc": "four"}}"#).unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref path, .. } if path == "system.n_qc"), "{err}");
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let err = ExperimentConfig::from_json(r#"{"seeds": []}"#).unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref path, .. } if path == "seeds"));
    }

    #[test]
    fn missing_circuit_file_is_rejected() {
        let err = ExperimentConfig::from_json(r#"{"workload": {"generator": "file", "path": "/nonexistent/c.txt"}}"#).unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref path, .. } if path == "workload.path"));
    }

    #[test]
    fn workload_tags() {
        let cfg = ExperimentConfig::from_json(r#"{"workload": {"generator": "random", "qubits": 8, "gates": 20}}"#).unwrap();
        assert_eq!(
            cfg.workload,
            Workload::Random {
                qubits: 8,
                gates: 20,
                two_qubit_fraction: 0.5
            }
        );
    }

    #[test]
    fn run_ghz_on_two_cores() {
        let cfg = ExperimentConfig {
            seeds: vec![7],
            ..ExperimentConfig::default()
        };
        let out = cmd_run(&cfg, true).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert_eq!(out.reports[0].mode, MacMode::Ct);
        assert_eq!(out.reports[1].mode, MacMode::Id);
        assert_eq!(out.traces.len(), 2);
        assert_eq!(out.csv().lines().count(), 3);
    }

    #[test]
    fn execution_modes_agree() {
        let cfg = ExperimentConfig {
            seeds: vec![1, 2],
            sweep: SweepConfig {
                sizes: vec![1, 2, 4],
                ..SweepConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let seq = ExperimentConfig {
            parallel: false,
            ..cfg.clone()
        };
        assert_eq!(cmd_sweep_size(&cfg).unwrap().csv(), cmd_sweep_size(&seq).unwrap().csv());
    }

    #[test]
    fn map_points_preserves_order() {
        let v: Vec<u32> = (0..100).collect();
        assert_eq!(map_points(&v, Execution::Parallel, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
