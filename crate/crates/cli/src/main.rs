//! `agc`: analyze an instance, synthesize a policy with its contract,
//! validate it by simulation and summarize the resulting artifacts.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | invalid input: parse, validation or usage error |
//! | 3 | the synthesis program is infeasible |
//! | 4 | solver failure or rejected solution |
//! | 5 | simulation found violations, or the policy failed a structural check |
//! | 6 | I/O error |
//! | 7 | synthesis artifact was produced from a different instance |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use agc_core::conic::{ConicError, Tolerances, DEFAULT_BACKEND};
use agc_core::infograph::DecompositionSummary;
use agc_core::model::ModelError;
use agc_core::simulate::{self, SimError};
use agc_core::synthesis::{synthesize_with, ContractShape, SynthesisError, SynthesisOptions};
use agc_core::{
    build_coupling_graphs, compute_decomposition, lift, load_instance, ProblemInstance,
    SimulationConfig, SimulationReport, SynthesisResult,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const EXIT_INPUT: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_SOLVER: u8 = 4;
const EXIT_VIOLATIONS: u8 = 5;
const EXIT_IO: u8 = 6;
const EXIT_HASH: u8 = 7;

#[derive(Parser)]
#[command(name = "agc", version, about = "Decentralized affine policy synthesis with assume-guarantee contracts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the information decomposition of an instance.
    Analyze {
        instance: PathBuf,
        /// Print the decomposition as JSON instead of text.
        #[arg(long)]
        json: bool,
        /// Also write the JSON decomposition artifact here.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Write the lifted trajectory operators to this JSON file.
        #[arg(long)]
        dump_lifted: Option<PathBuf>,
    },
    /// Solve the contract program and write the policy and contract.
    Synthesize {
        instance: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Shape::Oriented)]
        shape: Shape,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Monte Carlo validation of a synthesized policy.
    Simulate {
        instance: PathBuf,
        synthesis: PathBuf,
        #[arg(short = 'n', long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        /// Per-sample CSV table (slack, membership, costs).
        #[arg(long)]
        table: Option<PathBuf>,
        /// Absolute tolerance on constraint rows and contract membership.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Summarize every artifact in a directory.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Oriented,
    Scaled,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, env = "AGC_BACKEND", default_value = DEFAULT_BACKEND)]
    backend: String,
    #[arg(long, env = "AGC_FEAS_TOL")]
    feas_tol: Option<f64>,
    #[arg(long, env = "AGC_GAP_TOL")]
    gap_tol: Option<f64>,
    #[arg(long, env = "AGC_MAX_ITER")]
    max_iter: Option<u32>,
    /// Threshold of the independent residual check on the solver's answer.
    #[arg(long, env = "AGC_ACCEPT_TOL")]
    accept_tol: Option<f64>,
}

impl SolverArgs {
    fn tolerances(&self) -> Tolerances {
        let d = Tolerances::default();
        Tolerances {
            feasibility: self.feas_tol.unwrap_or(d.feasibility),
            gap: self.gap_tol.unwrap_or(d.gap),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            acceptance: self.accept_tol.unwrap_or(d.acceptance),
        }
    }

    fn overrides(&self, into: &mut BTreeMap<String, String>) {
        if self.backend != DEFAULT_BACKEND {
            into.insert("backend".into(), self.backend.clone());
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                into.insert(k.into(), v);
            }
        };
        put("feas_tol", self.feas_tol.map(|v| v.to_string()));
        put("gap_tol", self.gap_tol.map(|v| v.to_string()));
        put("max_iter", self.max_iter.map(|v| v.to_string()));
        put("accept_tol", self.accept_tol.map(|v| v.to_string()));
    }
}

/// Provenance recorded in every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    instance: String,
    command: String,
    overrides: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seed: Option<u64>,
    output_dir: String,
    tool_version: String,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    timestamp: u64,
}

impl RunManifest {
    fn new(instance: &Path, command: &str, out: Option<&Path>) -> Self {
        let output_dir = out
            .and_then(Path::parent)
            .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        Self {
            instance: instance.display().to_string(),
            command: command.to_string(),
            overrides: BTreeMap::new(),
            seed: None,
            output_dir,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AnalysisArtifact {
    manifest: RunManifest,
    instance_hash: String,
    decomposition: DecompositionSummary,
}

#[derive(Serialize, Deserialize)]
struct SynthesisArtifact {
    manifest: RunManifest,
    result: SynthesisResult,
}

#[derive(Serialize)]
struct SimulationArtifact<'a> {
    manifest: RunManifest,
    report: &'a SimulationReport,
}

#[derive(Serialize)]
struct LiftedArtifact<'a> {
    manifest: RunManifest,
    instance_hash: String,
    lifted: &'a agc_core::LiftedSystem,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Analyze {
            instance,
            json,
            out,
            dump_lifted,
        } => analyze(&instance, json, out.as_deref(), dump_lifted.as_deref()),
        Command::Synthesize {
            instance,
            out,
            shape,
            solver,
        } => synthesize(&instance, &out, shape, &solver),
        Command::Simulate {
            instance,
            synthesis,
            samples,
            seed,
            out,
            table,
            tol,
        } => simulate(&instance, &synthesis, samples, seed, tol, &out, table.as_deref()),
        Command::Report { dir } => report(&dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(path: &Path) -> Result<ProblemInstance, Failure> {
    load_instance(path).map_err(|e| match e {
        ModelError::Io { .. } => Failure::new(EXIT_IO, e),
        _ => Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_IO, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn analyze(path: &Path, json: bool, out: Option<&Path>, dump: Option<&Path>) -> Outcome {
    let instance = load(path)?;
    let decomp = compute_decomposition(&instance, &build_coupling_graphs(&instance));
    let artifact = AnalysisArtifact {
        manifest: RunManifest::new(path, "analyze", out),
        instance_hash: instance.content_hash(),
        decomposition: decomp.summary(),
    };
    if json {
        let text = serde_json::to_string_pretty(&artifact).map_err(|e| Failure::new(EXIT_IO, e))?;
        println!("{text}");
    } else {
        println!("{}", artifact.decomposition);
    }
    if let Some(out) = out {
        write_json(out, &artifact)?;
    }
    if let Some(dump) = dump {
        let lifted = lift(&instance, &decomp);
        write_json(
            dump,
            &LiftedArtifact {
                manifest: RunManifest::new(path, "analyze", Some(dump)),
                instance_hash: artifact.instance_hash,
                lifted: &lifted,
            },
        )?;
    }
    Ok(())
}

fn synthesis_failure(e: SynthesisError) -> Failure {
    let code = match &e {
        SynthesisError::Infeasible { .. } => EXIT_INFEASIBLE,
        SynthesisError::Conic(ConicError::UnknownBackend(_)) => EXIT_INPUT,
        _ => EXIT_SOLVER,
    };
    Failure::new(code, e)
}

fn synthesize(path: &Path, out: &Path, shape: Shape, solver: &SolverArgs) -> Outcome {
    let instance = load(path)?;
    let shape = match shape {
        Shape::Oriented => ContractShape::Oriented,
        Shape::Scaled => ContractShape::Scaled,
    };
    let options = SynthesisOptions {
        shape,
        backend: solver.backend.clone(),
        tolerances: solver.tolerances(),
    };
    let mut manifest = RunManifest::new(path, "synthesize", Some(out));
    solver.overrides(&mut manifest.overrides);
    if shape == ContractShape::Scaled {
        manifest.overrides.insert("shape".into(), "scaled".into());
    }
    let result = synthesize_with(&instance, &options).map_err(synthesis_failure)?;
    println!(
        "status: {:?}\nobjective: {:.9e}\nlambda: {:.6}, beta: {:.6}\nLMI dimension: {}\nsolver: {} ({} iterations, {:.3}s)",
        result.status,
        result.objective,
        result.variables.lambda,
        result.variables.beta,
        result.lmi_dim,
        result.diagnostics.backend,
        result.diagnostics.iterations,
        result.diagnostics.solve_seconds,
    );
    write_json(out, &SynthesisArtifact { manifest, result })
}

fn simulation_failure(e: SimError) -> Failure {
    let code = match &e {
        SimError::NoSamples | SimError::Length { .. } => EXIT_INPUT,
        SimError::Table { .. } => EXIT_IO,
        SimError::NotLocallyNested { .. } | SimError::Causality { .. } | SimError::Contract(_) => {
            EXIT_VIOLATIONS
        }
    };
    Failure::new(code, e)
}

fn simulate(
    path: &Path,
    synthesis: &Path,
    samples: usize,
    seed: u64,
    tol: f64,
    out: &Path,
    table: Option<&Path>,
) -> Outcome {
    if samples == 0 {
        return Err(simulation_failure(SimError::NoSamples));
    }
    let instance = load(path)?;
    let text = fs::read_to_string(synthesis)
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", synthesis.display())))?;
    let artifact: SynthesisArtifact = serde_json::from_str(&text)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", synthesis.display())))?;
    let hash = instance.content_hash();
    if artifact.result.instance_hash != hash {
        return Err(Failure::new(
            EXIT_HASH,
            format!(
                "{} was synthesized for instance {}, but {} hashes to {}",
                synthesis.display(),
                artifact.result.instance_hash,
                path.display(),
                hash
            ),
        ));
    }
    let config = SimulationConfig {
        samples,
        seed,
        feasibility_abs: tol,
        feasibility_rel: tol,
        membership_tol: tol,
        keep_samples: table.is_some(),
    };
    let report = simulate::run(&instance, &artifact.result, &config).map_err(simulation_failure)?;
    if let (Some(table), Some(rows)) = (table, report.rows.as_deref()) {
        simulate::write_table(table, rows).map_err(simulation_failure)?;
    }

    let mut manifest = RunManifest::new(path, "simulate", Some(out));
    manifest.seed = Some(seed);
    manifest
        .overrides
        .insert("synthesis".into(), synthesis.display().to_string());
    if tol != 1e-6 {
        manifest.overrides.insert("tol".into(), tol.to_string());
    }
    let stored = SimulationReport {
        rows: None,
        ..report.clone()
    };
    write_json(
        out,
        &SimulationArtifact {
            manifest,
            report: &stored,
        },
    )?;

    println!(
        "samples: {}\nconstraint violations: {} (worst slack {:.3e})\ncontract violations: {} (worst membership {:.6})\nsurrogate cost: {:.6e} ± {:.1e}\nactual cost: {:.6e} ± {:.1e}\nsynthesis objective: {:.6e}",
        report.samples,
        report.constraint_violations,
        report.worst_constraint_slack,
        report.contract_violations,
        report.worst_membership,
        report.surrogate_cost.mean,
        report.surrogate_cost.std_error,
        report.actual_cost.mean,
        report.actual_cost.std_error,
        report.synthesis_objective,
    );
    if report.violations() > 0 {
        return Err(Failure::new(
            EXIT_VIOLATIONS,
            format!(
                "{} constraint and {} contract violations",
                report.constraint_violations, report.contract_violations
            ),
        ));
    }
    Ok(())
}

fn summarize(value: &serde_json::Value) -> Option<String> {
    let command = value.pointer("/manifest/command")?.as_str()?;
    let num = |p: &str| value.pointer(p).and_then(serde_json::Value::as_f64);
    let int = |p: &str| value.pointer(p).and_then(serde_json::Value::as_u64);
    let line = match command {
        "analyze" if value.get("decomposition").is_some() => {
            let d: DecompositionSummary =
                serde_json::from_value(value.get("decomposition")?.clone()).ok()?;
            let last = d.to_string();
            format!("analyze     {}", last.lines().last().unwrap_or_default())
        }
        "analyze" => "lifted      operator dump".to_string(),
        "synthesize" => format!(
            "synthesize  {} objective {:.6e}, lambda {:.4}, LMI {}",
            value.pointer("/result/status")?.as_str()?,
            num("/result/objective")?,
            num("/result/variables/lambda")?,
            int("/result/lmi_dim")?,
        ),
        "simulate" => format!(
            "simulate    {} samples, {} constraint / {} contract violations, surrogate cost {:.6e} ± {:.1e} (objective {:.6e})",
            int("/report/samples")?,
            int("/report/constraint_violations")?,
            int("/report/contract_violations")?,
            num("/report/surrogate_cost/mean")?,
            num("/report/surrogate_cost/std_error")?,
            num("/report/synthesis_objective")?,
        ),
        _ => return None,
    };
    Some(line)
}

fn report(dir: &Path) -> Outcome {
    let io = |e: std::io::Error| Failure::new(EXIT_IO, format!("{}: {e}", dir.display()));
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut found = 0;
    for p in &paths {
        let Ok(text) = fs::read_to_string(p) else { continue };
        let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) else { continue };
        if let Some(line) = summarize(&value) {
            let name = p.file_name().unwrap_or_default().to_string_lossy();
            let hash = value
                .pointer("/instance_hash")
                .or_else(|| value.pointer("/result/instance_hash"))
                .or_else(|| value.pointer("/report/instance_hash"))
                .and_then(serde_json::Value::as_str)
                .map(|h| &h[..h.len().min(12)])
                .unwrap_or("-");
            let instance = value
                .pointer("/manifest/instance")
                .and_then(serde_json::Value::as_str)
                .unwrap_or("-");
            println!("{name}: [{instance} {hash}] {line}");
            found += 1;
        }
    }
    if found == 0 {
        println!("no artifacts in {}", dir.display());
    }
    Ok(())
}
