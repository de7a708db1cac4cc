//! Command-line driver: compile, verify, simulate, explore and report.
//!
//! Exit codes: 0 success, 2 invalid input or failed check, 3 no design fits
//! the constraints, 4 the simulation deadlocked or timed out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use itflow::allocation::{BankSpec, DieSpec};
use itflow::dse::{search, trial_log, DseError, DseSpace};
use itflow::frontend::{OpGraph, ProfileOverrides, TileConfig};
use itflow::fusion::fusion_report;
use itflow::graph::DataflowGraph;
use itflow::pipeline::{bundled, compile, on_chip_bytes, verify, CompileOptions, Compiled, PipelineError, VerifyError};
use itflow::sim::{simulate, Outcome, SimConfig};
use itflow::sizing::Strategy;
use serde_json::json;

const INVALID: u8 = 2;
const INFEASIBLE: u8 = 3;
const RUNTIME: u8 = 4;

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Self::new(INVALID, msg)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = if e.infeasible() { INFEASIBLE } else { INVALID };
        Failure::new(code, format!("{} pass failed: {e}\nhint: {}", e.pass(), e.hint()))
    }
}

impl From<VerifyError> for Failure {
    fn from(e: VerifyError) -> Self {
        let code = if e.is_runtime() { RUNTIME } else { INVALID };
        Failure::new(code, e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "itflow", version, about = "Stream-dataflow compiler driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lower, fuse, size and allocate an operator graph.
    Compile(CompileArgs),
    /// Check a compiled graph: structure, converters and a full simulation.
    Verify(SimArgs),
    /// Simulate a compiled graph and print the trace summary.
    Simulate(SimulateArgs),
    /// Search tile sizes and unroll budgets.
    Explore(ExploreArgs),
    /// Summarize a compiled graph.
    Report(ReportArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Operator graph JSON.
    #[arg(required_unless_present = "bundled")]
    input: Option<PathBuf>,
    /// Use a built-in graph instead: `demo` or `transformer`.
    #[arg(long, conflicts_with = "input")]
    bundled: Option<String>,
    /// Tiling config JSON.
    #[arg(long)]
    tiles: Option<PathBuf>,
    /// Full compile options JSON; the flags below override it.
    #[arg(long)]
    options: Option<PathBuf>,
    /// Per-node profile overrides JSON.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Require a profile override for every node.
    #[arg(long)]
    no_model: bool,
    /// Fusion budget per group in bytes.
    #[arg(long)]
    cmax: Option<u64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Partition across this many dies.
    #[arg(long)]
    dies: Option<usize>,
    /// Capacity of each die in bytes.
    #[arg(long, default_value_t = u64::MAX, requires = "dies")]
    die_capacity: u64,
    /// Assign buffers to the default memory bank classes.
    #[arg(long)]
    banks: bool,
}

#[derive(Args)]
struct CompileArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    /// Compiled graph JSON.
    graph: PathBuf,
    #[arg(long, default_value_t = SimConfig::default().horizon)]
    horizon: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Write per-FIFO occupancy changes as CSV.
    #[arg(long)]
    occupancy: Option<PathBuf>,
    /// Start every kernel as soon as its inputs allow.
    #[arg(long)]
    ignore_start_times: bool,
}

#[derive(Args)]
struct ExploreArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Search space JSON; the flags below override it.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Evaluate every grid point.
    #[arg(long)]
    grid: bool,
    #[arg(long, value_delimiter = ',')]
    tile_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    unroll_sizes: Option<Vec<u64>>,
    #[arg(long, default_value_t = SimConfig::default().horizon)]
    horizon: u64,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Compiled graph JSON.
    graph: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::invalid(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializes") + "\n"
}

fn load_inputs(a: &InputArgs) -> Result<(OpGraph, CompileOptions)> {
    let (ops, mut tiles) = match (&a.bundled, &a.input) {
        (Some(name), _) => bundled::by_name(name).ok_or_else(|| Failure::invalid(format!("no bundled graph `{name}`")))?,
        (None, Some(path)) => {
            let ops = OpGraph::from_json(&read(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
            (ops, TileConfig::default())
        }
        (None, None) => return Err(Failure::invalid("no input graph")),
    };
    let mut opts: CompileOptions = match &a.options {
        Some(p) => parse_json(p)?,
        None => CompileOptions::default(),
    };
    if a.options.is_some() && a.tiles.is_none() {
        tiles = opts.tiles.clone();
    }
    if let Some(p) = &a.tiles {
        tiles = TileConfig::from_json(&read(p)?).map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))?;
    }
    opts.tiles = tiles;
    if let Some(p) = &a.profiles {
        opts.overrides = parse_json::<ProfileOverrides>(p)?;
    }
    if a.no_model {
        opts.model.analytic = false;
    }
    if let Some(c) = a.cmax {
        if c == 0 {
            return Err(Failure::invalid("--cmax must be positive"));
        }
        opts.cmax = c;
    }
    if let Some(s) = a.strategy {
        opts.strategy = s;
    }
    if let Some(n) = a.dies {
        opts.dies = Some(DieSpec::uniform(n, a.die_capacity));
    }
    if a.banks {
        opts.banks = Some(BankSpec::default());
    }
    Ok((ops, opts))
}

fn write_artifacts(dir: &Path, c: &Compiled, cmax: u64) -> Result<()> {
    write(dir, "graph.json", &(c.graph.to_json() + "\n"))?;
    write(dir, "fusion.json", &pretty(&c.plan))?;
    write(dir, "fusion.txt", &fusion_report(&c.graph, &c.plan, cmax))?;
    write(dir, "sizing.json", &pretty(&c.sizing))?;
    write(dir, "memory.json", &pretty(&c.memory))?;
    write(
        dir,
        "allocation.json",
        &pretty(&json!({ "dies": c.dies, "banks": c.banks, "folded": c.folded })),
    )
}

fn run_compile(a: CompileArgs) -> Result<()> {
    let (ops, opts) = load_inputs(&a.input)?;
    let c = compile(&ops, &opts)?;
    write_artifacts(&a.out, &c, opts.cmax)?;
    println!(
        "{} groups, {} nodes, {} edges; intermediate bytes {} -> {} ({:.1}%); artifacts in {}",
        c.plan.groups.len(),
        c.graph.nodes.len(),
        c.graph.edges.len(),
        c.memory.baseline,
        c.memory.fused,
        100.0 * c.memory.ratio(),
        a.out.display()
    );
    Ok(())
}

fn load_graph(path: &Path) -> Result<DataflowGraph> {
    DataflowGraph::from_json(&read(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn sim_config(horizon: u64) -> SimConfig {
    SimConfig {
        horizon,
        ..Default::default()
    }
}

fn run_verify(a: SimArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let r = verify(&g, &sim_config(a.horizon))?;
    println!(
        "{}",
        json!({ "ok": true, "convertersChecked": r.converters_checked, "totalLatency": r.total_latency })
    );
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let g = load_graph(&a.sim.graph)?;
    let cfg = SimConfig {
        record_occupancy: a.occupancy.is_some(),
        honor_start_times: !a.ignore_start_times,
        ..sim_config(a.sim.horizon)
    };
    let trace = simulate(&g, &cfg).map_err(|e| Failure::invalid(e.to_string()))?;
    if let Some(p) = &a.occupancy {
        fs::write(p, trace.occupancy_csv()).map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))?;
    }
    println!("{}", trace.summary_json());
    match trace.outcome {
        Outcome::Completed => Ok(()),
        Outcome::Deadlock => Err(Failure::new(RUNTIME, "simulation deadlocked")),
        Outcome::Timeout => Err(Failure::new(RUNTIME, "simulation timed out")),
    }
}

fn run_explore(a: ExploreArgs) -> Result<()> {
    let (ops, opts) = load_inputs(&a.input)?;
    let mut space: DseSpace = match &a.space {
        Some(p) => parse_json(p)?,
        None => DseSpace::default(),
    };
    if let Some(s) = a.seed {
        space.seed = s;
    }
    if let Some(t) = a.trials {
        space.trials = t;
    }
    if a.grid {
        space.grid = true;
    }
    if let Some(t) = a.tile_sizes {
        space.default_tile_sizes = t;
    }
    if let Some(u) = a.unroll_sizes {
        space.overall_unroll_sizes = u;
    }
    match search(&ops, &opts, &space, &sim_config(a.horizon)) {
        Ok(out) => {
            write(&a.out, "trials.jsonl", &out.log_jsonl())?;
            write(&a.out, "best_tiles.json", &(out.tiles.to_json() + "\n"))?;
            let best = compile(
                &ops,
                &CompileOptions {
                    tiles: out.tiles.clone(),
                    ..opts.clone()
                },
            )?;
            write_artifacts(&a.out, &best, opts.cmax)?;
            println!("{}", serde_json::to_string(&out.trials[out.best]).expect("serializes"));
            Ok(())
        }
        Err(DseError::NoFeasible { least, trials }) => {
            write(&a.out, "trials.jsonl", &trial_log(&trials))?;
            Err(Failure::new(
                INFEASIBLE,
                format!(
                    "no feasible trial; least infeasible: {}",
                    serde_json::to_string(&least).expect("serializes")
                ),
            ))
        }
        Err(e) => Err(Failure::invalid(e.to_string())),
    }
}

fn run_report(a: ReportArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let mut groups: std::collections::BTreeMap<String, Vec<&str>> = Default::default();
    for n in &g.nodes {
        let key = n.fusion_index.map_or("-".to_string(), |i| i.to_string());
        groups.entry(key).or_default().push(&n.id);
    }
    let edges: Vec<_> = g
        .edges
        .iter()
        .map(|e| {
            json!({
                "id": e.id,
                "external": e.external,
                "depth": e.depth,
                "tokenBytes": e.ty.token_bytes(),
            })
        })
        .collect();
    let report = json!({
        "nodes": g.nodes.len(),
        "edges": edges,
        "groups": groups,
        "onChipBytes": on_chip_bytes(&g),
    });
    if a.json {
        print!("{}", pretty(&report));
        return Ok(());
    }
    let mut s = String::new();
    let _ = writeln!(s, "{} nodes, {} edges, {} on-chip bytes", g.nodes.len(), g.edges.len(), report["onChipBytes"]);
    for (k, members) in &groups {
        let _ = writeln!(s, "group {k}: {}", members.join(", "));
    }
    let _ = writeln!(s, "{:<40} {:>8} {:>10}", "edge", "depth", "bytes/tok");
    for e in &g.edges {
        let depth = if e.external {
            "ext".to_string()
        } else {
            e.depth.map_or("-".into(), |d| d.to_string())
        };
        let _ = writeln!(s, "{:<40} {:>8} {:>10}", e.id, depth, e.ty.token_bytes());
    }
    print!("{s}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Compile(a) => run_compile(a),
        Cmd::Verify(a) => run_verify(a),
        Cmd::Simulate(a) => run_simulate(a),
        Cmd::Explore(a) => run_explore(a),
        Cmd::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
