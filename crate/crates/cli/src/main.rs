//! `treegrid` command-line frontend.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 unparsable input,
//! 3 invalid input, 4 switching creates overloads, 5 switching disconnects
//! load, 6 stage cap exceeded, 7 unservable island, 8 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use treegrid::cascade::{run_cascade, CascadeConfig, CascadeError, PolicyKind};
use treegrid::equilibria::{self, check_feasibility, Controller, EquilibriumError, EquilibriumProblem, Feasibility};
use treegrid::io::{
    ccdf_csv, emit_case_json, emit_report, emit_trace_jsonl, parse_case_json_with, parse_case_matpower_subset,
    records_csv, to_json_pretty, CaseDocument, IoError, ReportFormat,
};
use treegrid::netmodel::{LineId, Network, NetworkError};
use treegrid::primaldual::{run_primal_dual, DetectorConfig, Outcome};
use treegrid::studies::{run_study, study_partitions, StudyConfig, StudyError};
use treegrid::topology::{
    bridge_block_decomposition, find_bridges, switch_off_lines_unchecked, Partition, TopologyError,
};

#[derive(Parser, Debug)]
#[command(name = "treegrid", version, about = "Cascading failures on tree-partitioned DC grids")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CaseArgs {
    /// Case file: native JSON, or MATPOWER when the extension is `.m`.
    case: PathBuf,
    /// Warn about unknown fields instead of rejecting them.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Output directory (default: $TREEGRID_OUT, else ./treegrid-out).
    #[arg(long, env = "TREEGRID_OUT", default_value = "treegrid-out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bridge-block decomposition and tie/internal line classification.
    Decompose {
        #[command(flatten)]
        case: CaseArgs,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Switch lines off and emit the revised case.
    Plan {
        #[command(flatten)]
        case: CaseArgs,
        /// Lines to switch off (default: the case's own list).
        #[arg(long, value_delimiter = ',')]
        switch: Vec<u32>,
        /// Emit the revised case even if it overloads lines.
        #[arg(long)]
        force: bool,
        /// Write the revised case here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one cascade and write its staged trace.
    Cascade {
        #[command(flatten)]
        case: CaseArgs,
        /// Initially failed lines.
        #[arg(long, value_delimiter = ',', required = true)]
        fail: Vec<u32>,
        #[arg(long, default_value = "uc")]
        controller: Controller,
        #[arg(long, default_value = "localization-first")]
        policy: PolicyKind,
        #[arg(long)]
        stage_cap: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// N−k security study.
    Study {
        #[command(flatten)]
        case: CaseArgs,
        /// TOML study configuration; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        profiles: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        controllers: Vec<Controller>,
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Distributed detection of critical failures by primal-dual dynamics.
    Detect {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        fail: Vec<u32>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Solve one post-contingency equilibrium and print it as JSON.
    Solve {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        fail: Vec<u32>,
        #[arg(long, default_value = "uc")]
        controller: Controller,
    },
}

/// An error with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

const PARSE: u8 = 2;
const INVALID: u8 = 3;
const OVERLOAD: u8 = 4;
const DISCONNECT: u8 = 5;
const STAGE_CAP: u8 = 6;
const UNSERVABLE: u8 = 7;
const NUMERICAL: u8 = 8;

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::new(if e.is_parse_error() { PARSE } else { INVALID }, e.to_string())
    }
}

impl From<NetworkError> for Failure {
    fn from(e: NetworkError) -> Self {
        Failure::new(INVALID, e.to_string())
    }
}

impl From<TopologyError> for Failure {
    fn from(e: TopologyError) -> Self {
        let code = match e {
            TopologyError::CreatesOverload(_) => OVERLOAD,
            TopologyError::DisconnectsLoad { .. } => DISCONNECT,
            _ => INVALID,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<EquilibriumError> for Failure {
    fn from(e: EquilibriumError) -> Self {
        let code = match e {
            EquilibriumError::NumericalFailure(_) => NUMERICAL,
            _ => INVALID,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<CascadeError> for Failure {
    fn from(e: CascadeError) -> Self {
        let code = match &e {
            CascadeError::StageCapExceeded { .. } => STAGE_CAP,
            CascadeError::UnservableIsland { .. } => UNSERVABLE,
            CascadeError::Equilibrium(EquilibriumError::NumericalFailure(_)) => NUMERICAL,
            CascadeError::Topology(t) => return t.clone().into(),
            _ => INVALID,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<StudyError> for Failure {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Topology(t) => t.into(),
            other => Failure::new(INVALID, other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(1, format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Decompose { case, json } => decompose(&case, json),
        Command::Plan { case, switch, force, out } => plan(&case, &switch, force, out.as_deref()),
        Command::Cascade { case, fail, controller, policy, stage_cap, out } => {
            cascade(&case, &fail, controller, &policy, stage_cap, &out.out_dir)
        }
        Command::Study { case, config, seed, jobs, profiles, samples, k, alpha, controllers, policy, out } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
                    toml::from_str::<StudyConfig>(&text)
                        .map_err(|e| Failure::new(PARSE, format!("{}: {e}", p.display())))?
                }
                None => StudyConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if jobs.is_some() {
                cfg.jobs = jobs;
            }
            if let Some(p) = profiles {
                cfg.profiles = p;
            }
            if let Some(s) = samples {
                cfg.samples = s;
            }
            if !k.is_empty() {
                cfg.ks = k;
            }
            if !alpha.is_empty() {
                cfg.alphas = alpha;
            }
            if !controllers.is_empty() {
                cfg.controllers = controllers;
            }
            if let Some(p) = policy {
                cfg.policy = p;
            }
            study(&case, cfg, &out.out_dir)
        }
        Command::Detect { case, fail, step, budget, threshold, out } => {
            let mut cfg = DetectorConfig::default();
            if let Some(s) = step {
                cfg.step = s;
            }
            if let Some(b) = budget {
                cfg.budget = b;
            }
            cfg.threshold = threshold;
            detect(&case, &fail, &cfg, &out.out_dir)
        }
        Command::Solve { case, fail, controller } => solve(&case, &fail, controller),
    }
}

fn load(case: &CaseArgs) -> Result<(CaseDocument, Network), Failure> {
    let bytes = fs::read(&case.case).map_err(|e| io_failure(&case.case, e))?;
    let locate = |e: IoError| {
        let code = if e.is_parse_error() { PARSE } else { INVALID };
        Failure::new(code, format!("{}: {e}", case.case.display()))
    };
    let parsed = if case.case.extension().is_some_and(|e| e == "m") {
        parse_case_matpower_subset(&bytes).map_err(locate)?
    } else {
        parse_case_json_with(&bytes, !case.lenient).map_err(locate)?
    };
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    let net = parsed.doc.to_network().map_err(locate)?;
    Ok((parsed.doc, net))
}

fn line_ids(net: &Network, ids: &[u32]) -> Result<Vec<LineId>, Failure> {
    ids.iter()
        .map(|&i| {
            net.require_line(LineId(i))?;
            Ok(LineId(i))
        })
        .collect()
}

fn write(dir: &Path, name: &str, content: &[u8]) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| io_failure(&path, e))?;
    Ok(path)
}

fn describe(net: &Network, part: &Partition) -> serde_json::Value {
    let bridges: Vec<u32> = find_bridges(net).iter().map(|l| l.0).collect();
    let areas: Vec<Vec<u32>> = part.area_ids(net).iter().map(|a| a.iter().map(|b| b.0).collect()).collect();
    let ids = |v: &[usize]| v.iter().map(|&k| net.line(k).id.0).collect::<Vec<_>>();
    serde_json::json!({
        "areas": areas,
        "bridges": bridges,
        "tie_lines": ids(part.tie_lines()),
        "internal_lines": ids(part.internal_lines()),
    })
}

fn print_decomposition(net: &Network, part: &Partition, w: &mut dyn Write) {
    let mut text = format!("areas: {}\n", part.len());
    for (i, a) in part.area_ids(net).iter().enumerate() {
        let buses: Vec<String> = a.iter().map(|b| b.to_string()).collect();
        text += &format!("  area {i}: buses {}\n", buses.join(" "));
    }
    let bridges: Vec<String> = find_bridges(net).iter().map(|l| l.to_string()).collect();
    let list = |v: Vec<String>| if v.is_empty() { "none".to_string() } else { v.join(" ") };
    text += &format!("bridges: {}\n", list(bridges));
    let ids = |v: &[usize]| list(v.iter().map(|&k| net.line(k).id.to_string()).collect());
    text += &format!("tie lines: {}\n", ids(part.tie_lines()));
    text += &format!("internal lines: {}\n", ids(part.internal_lines()));
    let _ = w.write_all(text.as_bytes());
}

fn decompose(case: &CaseArgs, json: bool) -> Result<(), Failure> {
    let (_, net) = load(case)?;
    let part = bridge_block_decomposition(&net);
    if json {
        println!("{}", serde_json::to_string_pretty(&describe(&net, &part)).unwrap_or_default());
    } else {
        print_decomposition(&net, &part, &mut std::io::stdout());
    }
    Ok(())
}

fn plan(case: &CaseArgs, switch: &[u32], force: bool, out: Option<&Path>) -> Result<(), Failure> {
    let (doc, net) = load(case)?;
    let ids = if switch.is_empty() { doc.switch_off_ids() } else { line_ids(&net, switch)? };
    let (revised, overloaded) = switch_off_lines_unchecked(&net, &ids)?;
    if !overloaded.is_empty() {
        let err = TopologyError::CreatesOverload(overloaded);
        if !force {
            return Err(err.into());
        }
        log::warn!("{err}; emitting anyway");
        eprintln!("warning: {err}");
    }
    let part = bridge_block_decomposition(&revised);
    let text = emit_case_json(&CaseDocument::from_network(&revised, doc.name.clone(), &[]));
    let switched = ids.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ");
    match out {
        Some(p) => {
            fs::write(p, text + "\n").map_err(|e| io_failure(p, e))?;
            println!("switched off: {switched}");
            print_decomposition(&revised, &part, &mut std::io::stdout());
        }
        None => {
            eprintln!("switched off: {switched}");
            print_decomposition(&revised, &part, &mut std::io::stderr());
            println!("{text}");
        }
    }
    Ok(())
}

/// Network and partition a controller runs on: UC uses the case's
/// switched topology, the others the original one.
fn topology_for(doc: &CaseDocument, net: &Network, controller: Controller) -> Result<(Network, Partition), Failure> {
    let (revised, uc, other) = study_partitions(net, &doc.switch_off_ids())?;
    Ok(match controller {
        Controller::Uc => (revised, uc),
        _ => (net.clone(), other),
    })
}

fn cascade(
    case: &CaseArgs,
    fail: &[u32],
    controller: Controller,
    policy: &PolicyKind,
    stage_cap: Option<usize>,
    out_dir: &Path,
) -> Result<(), Failure> {
    let (doc, net) = load(case)?;
    let failure = line_ids(&net, fail)?;
    let (net, part) = topology_for(&doc, &net, controller)?;
    let cfg = CascadeConfig { stage_cap, ..Default::default() };
    let result = run_cascade(&net, &part, &failure, controller, policy, &cfg);
    let trace = match &result {
        Ok(t) => Some(t),
        Err(e) => e.trace(),
    };
    if let Some(t) = trace {
        let path = write(out_dir, "trace.jsonl", emit_trace_jsonl(t).as_bytes())?;
        println!("stages={}, lifts={}, llr={}", t.stages.len(), t.lift_count(), treegrid::io::round_sig(t.llr));
        eprintln!("trace written to {}", path.display());
    }
    result.map(|_| ()).map_err(Failure::from)
}

fn study(case: &CaseArgs, cfg: StudyConfig, out_dir: &Path) -> Result<(), Failure> {
    let (doc, net) = load(case)?;
    let mut cfg = cfg;
    if cfg.switch_off.is_empty() {
        cfg.switch_off = doc.switch_off_ids();
    }
    let report = run_study(&net, &cfg)?;
    write(out_dir, "report.json", &emit_report(&report, ReportFormat::Json))?;
    write(out_dir, "cells.csv", &emit_report(&report, ReportFormat::Csv))?;
    write(out_dir, "records.csv", records_csv(&report).as_bytes())?;
    for c in &report.cells {
        let tag = format!("{}_k{}_a{}", c.controller, c.k, treegrid::io::round_sig(c.alpha));
        write(out_dir, &format!("ccdf_llr_{tag}.csv"), ccdf_csv("llr", &c.llr_ccdf).as_bytes())?;
        write(out_dir, &format!("ccdf_adjust_{tag}.csv"), ccdf_csv("adjusted", &c.adjust_ccdf).as_bytes())?;
    }
    println!(
        "{:<8} {:>3} {:>6} {:>9} {:>22} {:>18} {:>10}",
        "ctrl", "k", "alpha", "scenarios", "vulnerable avg(min,max)", "llr avg(max)", "one-area"
    );
    for c in &report.cells {
        let v = &c.vulnerable_fraction;
        println!(
            "{:<8} {:>3} {:>6.2} {:>9} {:>8.4} ({:.4},{:.4}) {:>9.5} ({:.5}) {:>6}/{}",
            c.controller.to_string(),
            c.k,
            c.alpha,
            c.scenarios,
            v.avg,
            v.min,
            v.max,
            c.llr_avg,
            c.llr_max,
            c.area_involvement.one,
            c.vulnerable
        );
    }
    let errors: usize = report.cells.iter().map(|c| c.errors).sum();
    if errors > 0 {
        eprintln!("{errors} scenarios ended in errors; see records.csv");
    }
    eprintln!("report written to {}", out_dir.display());
    Ok(())
}

fn uc_problem(doc: &CaseDocument, net: &Network, fail: &[u32]) -> Result<EquilibriumProblem, Failure> {
    problem_for(doc, net, fail, Controller::Uc)
}

fn problem_for(
    doc: &CaseDocument,
    net: &Network,
    fail: &[u32],
    controller: Controller,
) -> Result<EquilibriumProblem, Failure> {
    let failure = line_ids(net, fail)?;
    let (net, part) = topology_for(doc, net, controller)?;
    let (r, post) = treegrid::cascade::line_outage_disturbance(&net, &failure)?;
    let r = r.to_dense(&net);
    Ok(EquilibriumProblem::new(post, part, r, controller)?)
}

fn detect(case: &CaseArgs, fail: &[u32], cfg: &DetectorConfig, out_dir: &Path) -> Result<(), Failure> {
    let (doc, net) = load(case)?;
    let problem = uc_problem(&doc, &net, fail)?;
    let outcome = run_primal_dual(&problem, cfg).map_err(|e| Failure::new(NUMERICAL, e.to_string()))?;
    let path = write(out_dir, "dual_trace.csv", outcome.trace().to_csv().as_bytes())?;
    let oracle = check_feasibility(&problem)?;
    let oracle_name = if oracle.is_feasible() { "Feasible" } else { "Infeasible" };
    let agrees = match &outcome {
        Outcome::Converged { .. } => Some(oracle.is_feasible()),
        Outcome::CriticalDetected { .. } => Some(!oracle.is_feasible()),
        Outcome::Budget { .. } => None,
    };
    match agrees {
        Some(true) => println!("{}; oracle agrees ({oracle_name})", outcome.verdict()),
        Some(false) => println!("{}; oracle disagrees ({oracle_name})", outcome.verdict()),
        None => println!(
            "Budget; oracle says {oracle_name}; raise --budget or --step, or lower --threshold"
        ),
    }
    if let Outcome::CriticalDetected { group, iteration, .. } = &outcome {
        println!("alarm on {} multipliers at iteration {iteration}", group.name());
    }
    if let Feasibility::Infeasible(c) = &oracle {
        println!("certificate gap {:e}", c.epsilon);
    }
    eprintln!("dual trace written to {}", path.display());
    Ok(())
}

fn solve(case: &CaseArgs, fail: &[u32], controller: Controller) -> Result<(), Failure> {
    let (doc, net) = load(case)?;
    let problem = problem_for(&doc, &net, fail, controller)?;
    let eq = equilibria::solve(&problem)?;
    let ids = |f: &dyn Fn(usize) -> f64| -> serde_json::Map<String, serde_json::Value> {
        problem
            .net
            .buses()
            .iter()
            .enumerate()
            .map(|(j, b)| (b.id.to_string(), serde_json::json!(f(j))))
            .collect()
    };
    let flows: serde_json::Map<String, serde_json::Value> = problem
        .net
        .lines()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.in_service)
        .map(|(k, l)| (l.id.to_string(), serde_json::json!(l.base_flow + eq.f[k])))
        .collect();
    let out = serde_json::json!({
        "controller": controller,
        "objective": eq.objective,
        "d": ids(&|j| eq.d[j]),
        "omega": ids(&|j| eq.omega[j]),
        "theta": ids(&|j| eq.theta[j]),
        "flow": flows,
        "ace_groups": eq.ace_groups,
    });
    println!("{}", to_json_pretty(&out));
    Ok(())
}
