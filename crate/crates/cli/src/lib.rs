//! Command-line front end: argument parsing, config overrides and output files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
pub use clap::Parser;

use idmac_core::circuit::{gen_ghz, gen_graphstate, gen_qft, gen_random_circuit, ring_edges};
use idmac_core::experiment::{
    benchmark_csv, cmd_benchmarks, cmd_run, cmd_sweep_qsf, cmd_sweep_size, compare_modes, manifest_json, ExperimentConfig,
};
use idmac_core::system::MacMode;

#[derive(Parser)]
#[command(name = "idmac", version, about = "Classical control-plane simulator for multi-chip quantum computers")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one workload under each mode and seed.
    Run(Common),
    /// Sweep the number of cores with the scaled random workload.
    SweepSize(Common),
    /// Sweep the quantum scaling factor over the size grid.
    SweepQsf(Common),
    /// Compare CT and ID on the benchmark suite.
    Benchmarks(Common),
    /// Write a generated circuit in text form.
    GenCircuit(GenArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-run trace CSVs next to the report.
    #[arg(long)]
    trace: bool,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Comma-separated core counts for the sweeps.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Sweep every size from 1 to 100.
    #[arg(long)]
    full_grid: bool,
    /// Run sweep points one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ct,
    Id,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Ghz,
    Qft,
    Graphstate,
    Random,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    generator: Generator,
    #[arg(long)]
    qubits: usize,
    #[arg(long, default_value_t = 0)]
    gates: usize,
    #[arg(long, default_value_t = 0.5)]
    two_qubit_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(args: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(mode) = args.mode {
        cfg.modes = match mode {
            ModeArg::Ct => vec![MacMode::Ct],
            ModeArg::Id => vec![MacMode::Id],
            ModeArg::Both => MacMode::BOTH.to_vec(),
        };
    }
    if let Some(sizes) = &args.sizes {
        cfg.sweep.sizes = sizes.clone();
    }
    cfg.sweep.full_grid |= args.full_grid;
    cfg.parallel &= !args.sequential;
    cfg.validate()?;
    Ok(cfg)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes the CSV and its manifest, or prints the CSV when no path is set.
fn emit(command: &str, cfg: &ExperimentConfig, out: Option<&Path>, csv: &str, extra: Vec<PathBuf>) -> Result<()> {
    let Some(out) = out else {
        print!("{csv}");
        return Ok(());
    };
    write(out, csv)?;
    let mut outputs = vec![out.to_path_buf()];
    outputs.extend(extra);
    let manifest = cfg
        .output
        .manifest
        .clone()
        .unwrap_or_else(|| with_suffix(out, ".manifest.json"));
    write(&manifest, &manifest_json(command, cfg, &outputs))
}

fn run(command: &str, args: Common) -> Result<()> {
    let cfg = load_config(&args)?;
    let out = args.out.clone().or_else(|| cfg.output.report.clone());
    match command {
        "run" => {
            let result = cmd_run(&cfg, args.trace)?;
            let mut traces = Vec::new();
            if args.trace {
                let Some(base) = out.as_deref().or(cfg.output.trace.as_deref()) else {
                    bail!("--trace needs --out (or output.report / output.trace in the config)");
                };
                for t in &result.traces {
                    let path = with_suffix(base, &format!(".trace.{}.{}.csv", t.mode.name().to_lowercase(), t.seed));
                    write(&path, &t.to_csv())?;
                    traces.push(path);
                }
            }
            emit(command, &cfg, out.as_deref(), &result.csv(), traces)
        }
        "sweep-size" | "sweep-qsf" => {
            let result = if command == "sweep-size" {
                cmd_sweep_size(&cfg)?
            } else {
                cmd_sweep_qsf(&cfg)?
            };
            if out.is_some() {
                for c in compare_modes(&result) {
                    eprintln!(
                        "n_qc={:>3} qsf={:<5} speedup={:6.2}% id/ct c_comm={:.3}",
                        c.n_qc, c.qsf, c.speedup_pct, c.c_comm_ratio
                    );
                }
            }
            emit(command, &cfg, out.as_deref(), &result.csv(), Vec::new())
        }
        "benchmarks" => {
            let rows = cmd_benchmarks(&cfg)?;
            emit(command, &cfg, out.as_deref(), &benchmark_csv(&rows), Vec::new())
        }
        _ => unreachable!(),
    }
}

fn gen_circuit(args: GenArgs) -> Result<()> {
    let circuit = match args.generator {
        Generator::Ghz => gen_ghz(args.qubits)?,
        Generator::Qft => gen_qft(args.qubits)?,
        Generator::Graphstate => gen_graphstate(&ring_edges(args.qubits), args.qubits)?,
        Generator::Random => gen_random_circuit(args.qubits, args.gates, args.two_qubit_fraction, args.seed)?,
    };
    let text = circuit.to_text();
    match args.out {
        Some(path) => write(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Executes the parsed subcommand.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => run("run", a),
        Command::SweepSize(a) => run("sweep-size", a),
        Command::SweepQsf(a) => run("sweep-qsf", a),
        Command::Benchmarks(a) => run("benchmarks", a),
        Command::GenCircuit(a) => gen_circuit(a),
    }
}
