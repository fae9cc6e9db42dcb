use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use dyndag::check::{check_plan, runtime_mem_plan, sized_lifetimes};
use dyndag::exec::{plan_exec, ExecConfig, ExecPlan};
use dyndag::fusion::{build_plan, FusionPlan};
use dyndag::graph::{load_graph, Graph};
use dyndag::interp::{interpret, interpret_order, ConcreteEnv};
use dyndag::mem::{plan, plan_optimal, MemPlan, Strategy, DEFAULT_ORACLE_CAP};
use dyndag::ops::catalog_records;
use dyndag::pipeline::{parse_bindings, run_pipeline, versioned, PipelineConfig, PipelineError};
use dyndag::rdp::{run_rdp_with, RdpConfig, RdpResult};
use dyndag::report::{build_report, render_table};

#[derive(Parser)]
#[command(name = "dyndag", version, about = "Analyze and plan dynamic computational graphs")]
struct Cli {
    /// Seed for dynamic outcomes and generated environments; DYNDAG_SEED overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Largest subgraph searched exhaustively.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    exhaustive_cap: Option<u64>,
    /// Most kernel versions a fusion group may need.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    version_cap: Option<u64>,
    /// Longest integer tensor whose contents are tracked.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    value_cap: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the rank/dimension propagation and print the S/V maps.
    Analyze {
        graph: PathBuf,
        /// Also print node classes and sweep counts.
        #[arg(long)]
        dump_state: bool,
        #[arg(long)]
        json: bool,
    },
    /// Build a fusion, execution-order, or memory plan.
    Plan {
        #[command(subcommand)]
        which: PlanCmd,
    },
    /// Execute the graph concretely, optionally checking plans against the run.
    Simulate {
        graph: PathBuf,
        #[command(flatten)]
        env: EnvArgs,
        /// `exec.json,mem.json` to check against the run.
        #[arg(long)]
        check: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Summarize fusion, subgraph, and memory statistics.
    Report {
        graph: PathBuf,
        #[arg(long)]
        fusion: PathBuf,
        #[arg(long)]
        exec: PathBuf,
        /// Symbol bindings; repeat for a batch. Defaults to three seeded random environments.
        #[arg(long)]
        env: Vec<String>,
        #[arg(long, default_value_t = dyndag::mem::DEFAULT_ALIGNMENT)]
        alignment: u64,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze, plan, execute, and check, writing every artifact.
    Pipeline {
        graph: PathBuf,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, value_enum, default_value_t = StrategyArg::FromPeak)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = dyndag::mem::DEFAULT_ALIGNMENT)]
        alignment: u64,
        /// Directory for analysis.json, fusion.json, exec.json, mem.json, report.json.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// List the operator catalog.
    Ops {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum PlanCmd {
    Fusion {
        graph: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Exec {
        graph: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Mem {
        graph: PathBuf,
        /// Execution plan whose global order is used; planned on the fly when absent.
        #[arg(long)]
        order: Option<PathBuf>,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, value_enum, default_value_t = StrategyArg::FromPeak)]
        strategy: StrategyArg,
        /// Emit from-peak, best-fit, and the exact oracle when it is small enough.
        #[arg(long)]
        compare: bool,
        #[arg(long, default_value_t = dyndag::mem::DEFAULT_ALIGNMENT)]
        alignment: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EnvArgs {
    /// Symbol bindings such as `N=64,M=3`.
    #[arg(long, default_value = "")]
    env: String,
    /// Taken branch per Switch node, such as `sw1=0`.
    #[arg(long, default_value = "")]
    branches: String,
    /// Full environment as JSON (symbols, values, branches, outcomes); flags override it.
    #[arg(long)]
    env_file: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    FromPeak,
    BestFit,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::FromPeak => Strategy::FromPeak,
            StrategyArg::BestFit => Strategy::BestFit,
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("input: {0}")]
    Input(String),
    #[error("analysis: {0}")]
    Analysis(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Analysis(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn analysis<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Analysis(e.to_string())
}

struct Ctx {
    seed: u64,
    rdp: RdpConfig,
    exec: ExecConfig,
    version_cap: u64,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Ctx, CliError> {
        let seed = match std::env::var("DYNDAG_SEED") {
            Ok(s) => s.trim().parse().map_err(|_| input(format!("DYNDAG_SEED `{s}` is not an integer")))?,
            Err(_) => cli.seed,
        };
        let mut rdp = RdpConfig::default();
        if let Some(c) = cli.value_cap {
            rdp.value_cap = c as usize;
        }
        let mut exec = ExecConfig::default();
        if let Some(c) = cli.exhaustive_cap {
            exec.exhaustive_cap = c as usize;
        }
        Ok(Ctx {
            seed,
            rdp,
            exec,
            version_cap: cli.version_cap.unwrap_or(dyndag::fusion::DEFAULT_VERSION_CAP),
        })
    }

    fn analyze(&self, g: &Graph) -> Result<RdpResult, CliError> {
        run_rdp_with(g, g.topo_order(), &self.rdp).map_err(analysis)
    }

    fn env(&self, g: &Graph, a: &EnvArgs) -> Result<ConcreteEnv, CliError> {
        let mut env = match &a.env_file {
            Some(p) => read_json::<ConcreteEnv>(p)?,
            None => ConcreteEnv {
                seed: self.seed,
                ..Default::default()
            },
        };
        env.symbols.extend(parse_bindings(&a.env).map_err(input)?);
        for (k, v) in parse_bindings(&a.branches).map_err(input)? {
            let b = usize::try_from(v).map_err(|_| input(format!("branch for `{k}` is negative")))?;
            env.branches.insert(k, b);
        }
        for s in &g.symbols {
            if !env.symbols.contains_key(s) {
                return Err(input(format!("no binding for symbol `{s}` (pass --env {s}=...)")));
            }
        }
        Ok(env)
    }

    fn random_envs(&self, g: &Graph, count: usize) -> Vec<ConcreteEnv> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        if g.symbols.is_empty() {
            return vec![ConcreteEnv::with_symbols(Default::default(), self.seed)];
        }
        (0..count)
            .map(|_| {
                let symbols = g.symbols.iter().map(|s| (s.clone(), rng.gen_range(2..=16))).collect();
                ConcreteEnv::with_symbols(symbols, self.seed)
            })
            .collect()
    }
}

fn load(path: &Path) -> Result<Graph, CliError> {
    load_graph(path).map_err(input)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| input(format!("cannot read `{}`: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input(format!("`{}`: {e}", path.display())))
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(&versioned(v)).expect("artifacts serialize");
    s.push('\n');
    s
}

fn emit<T: Serialize>(v: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = pretty(v);
    match out {
        Some(p) => fs::write(p, text).map_err(|e| input(format!("cannot write `{}`: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_analyze(ctx: &Ctx, path: &Path, dump_state: bool, as_json: bool) -> Result<(), CliError> {
    let g = load(path)?;
    let r = ctx.analyze(&g)?;
    if as_json {
        return emit(&r, None);
    }
    for (t, s) in &r.shapes {
        println!("{t}: shape {s} value {}", r.value(t));
    }
    if dump_state {
        println!("sweeps: {}", r.sweeps);
        for n in &g.nodes {
            println!("node {} ({}): {}", n.id, n.op, r.classes[&n.id].as_str());
        }
        let nac: Vec<&str> = r.nac_nodes.iter().map(String::as_str).collect();
        println!("nac producers: [{}]", nac.join(", "));
    }
    Ok(())
}

fn exec_for(ctx: &Ctx, g: &Graph, r: &RdpResult, order: Option<&Path>) -> Result<ExecPlan, CliError> {
    match order {
        Some(p) => read_json(p),
        None => Ok(plan_exec(g, r, &ctx.exec)),
    }
}

fn cmd_plan(ctx: &Ctx, which: &PlanCmd) -> Result<(), CliError> {
    match which {
        PlanCmd::Fusion { graph, out } => {
            let g = load(graph)?;
            let r = ctx.analyze(&g)?;
            emit(&build_plan(&g, &r, ctx.version_cap), out.as_deref())
        }
        PlanCmd::Exec { graph, out } => {
            let g = load(graph)?;
            let r = ctx.analyze(&g)?;
            emit(&plan_exec(&g, &r, &ctx.exec), out.as_deref())
        }
        PlanCmd::Mem {
            graph,
            order,
            env,
            strategy,
            compare,
            alignment,
            out,
        } => {
            let g = load(graph)?;
            let r = ctx.analyze(&g)?;
            let env = ctx.env(&g, env)?;
            let exec = exec_for(ctx, &g, &r, order.as_deref())?;
            if !compare {
                let (_, mem) = runtime_mem_plan(&g, &env, &exec, (*strategy).into(), *alignment).map_err(analysis)?;
                return emit(&mem, out.as_deref());
            }
            let (trace, fp) = runtime_mem_plan(&g, &env, &exec, Strategy::FromPeak, *alignment).map_err(analysis)?;
            let lts = sized_lifetimes(&trace);
            let bf = plan(&lts, Strategy::BestFit, *alignment).map_err(analysis)?;
            let oracle: Option<MemPlan> = plan_optimal(&lts, *alignment, DEFAULT_ORACLE_CAP).ok();
            emit(
                &json!({ "from_peak": fp, "best_fit": bf, "oracle": oracle }),
                out.as_deref(),
            )
        }
    }
}

fn cmd_simulate(ctx: &Ctx, path: &Path, env: &EnvArgs, check: Option<&str>, as_json: bool) -> Result<(), CliError> {
    let g = load(path)?;
    let env = ctx.env(&g, env)?;
    let Some(files) = check else {
        let trace = interpret(&g, &env).map_err(analysis)?;
        if as_json {
            return emit(&trace, None);
        }
        println!("executed: {}", trace.executed.join(" "));
        for (sw, b) in &trace.branches {
            println!("branch {sw}: {b}");
        }
        for o in &g.outputs {
            if let Some(c) = trace.tensors.get(o) {
                println!("output {o}: {:?}", c.shape);
            }
        }
        println!("peak live bytes: {}", trace.peak);
        return Ok(());
    };
    let (exec_path, mem_path) = files
        .split_once(',')
        .ok_or_else(|| input("--check expects `exec.json,mem.json`"))?;
    let exec: ExecPlan = read_json(Path::new(exec_path.trim()))?;
    let mem: MemPlan = read_json(Path::new(mem_path.trim()))?;
    let r = ctx.analyze(&g)?;
    let order: Vec<usize> = exec.global_order.iter().filter_map(|id| g.node_index(id)).collect();
    let trace = interpret_order(&g, &env, &order).map_err(analysis)?;
    let rep = check_plan(&g, &r, &env, &exec, &mem).map_err(analysis)?;
    if as_json {
        emit(&json!({ "trace": trace, "check": rep }), None)?;
    } else {
        println!("peak live bytes: {}", rep.observed_peak);
        println!("arena: {}", rep.arena);
        for v in &rep.violations {
            println!("{:?}: {}", v.check, v.detail);
        }
        println!("check: {}", if rep.ok { "ok" } else { "FAILED" });
    }
    if rep.ok {
        Ok(())
    } else {
        Err(CliError::Check(format!("{} violation(s)", rep.violations.len())))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_report(
    ctx: &Ctx,
    path: &Path,
    fusion: &Path,
    exec: &Path,
    envs: &[String],
    alignment: u64,
    as_json: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let g = load(path)?;
    let fusion: FusionPlan = read_json(fusion)?;
    let exec: ExecPlan = read_json(exec)?;
    let envs = if envs.is_empty() {
        ctx.random_envs(&g, 3)
    } else {
        envs.iter()
            .map(|e| {
                ctx.env(
                    &g,
                    &EnvArgs {
                        env: e.clone(),
                        branches: String::new(),
                        env_file: None,
                    },
                )
            })
            .collect::<Result<_, _>>()?
    };
    let rep = build_report(&g, &fusion, &exec, &envs, alignment).map_err(analysis)?;
    if let Some(p) = out {
        emit(&rep, Some(p))?;
    }
    if as_json {
        emit(&rep, None)
    } else {
        print!("{}", render_table(&rep));
        Ok(())
    }
}

fn cmd_pipeline(
    ctx: &Ctx,
    path: &Path,
    env: &EnvArgs,
    strategy: StrategyArg,
    alignment: u64,
    out_dir: &Path,
) -> Result<(), CliError> {
    let g = load(path)?;
    let env = ctx.env(&g, env)?;
    let cfg = PipelineConfig {
        rdp: ctx.rdp.clone(),
        exec: ctx.exec.clone(),
        version_cap: ctx.version_cap,
        strategy: strategy.into(),
        alignment,
    };
    let a = run_pipeline(&g, &env, &cfg).map_err(|e| match e {
        PipelineError::Analysis(e) => analysis(e),
        PipelineError::Check(e) => analysis(e),
    })?;
    fs::create_dir_all(out_dir).map_err(|e| input(format!("cannot create `{}`: {e}", out_dir.display())))?;
    emit(&a.analysis, Some(&out_dir.join("analysis.json")))?;
    emit(&a.fusion, Some(&out_dir.join("fusion.json")))?;
    emit(&a.exec, Some(&out_dir.join("exec.json")))?;
    emit(&a.mem, Some(&out_dir.join("mem.json")))?;
    emit(&a.report, Some(&out_dir.join("report.json")))?;
    print!("{}", render_table(&a.report));
    if a.check.ok {
        Ok(())
    } else {
        Err(CliError::Check(format!("{} violation(s)", a.check.violations.len())))
    }
}

fn cmd_ops(as_json: bool) -> Result<(), CliError> {
    let ops = catalog_records();
    if as_json {
        return emit(&json!({ "ops": ops }), None);
    }
    for o in &ops {
        let max = o.max_inputs.map_or("*".to_string(), |m| m.to_string());
        println!("{:<20} {:<7} inputs {}..{}", o.name, o.class.as_str(), o.min_inputs, max);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = Ctx::new(cli)?;
    match &cli.cmd {
        Cmd::Analyze { graph, dump_state, json } => cmd_analyze(&ctx, graph, *dump_state, *json),
        Cmd::Plan { which } => cmd_plan(&ctx, which),
        Cmd::Simulate { graph, env, check, json } => cmd_simulate(&ctx, graph, env, check.as_deref(), *json),
        Cmd::Report {
            graph,
            fusion,
            exec,
            env,
            alignment,
            json,
            out,
        } => cmd_report(&ctx, graph, fusion, exec, env, *alignment, *json, out.as_deref()),
        Cmd::Pipeline {
            graph,
            env,
            strategy,
            alignment,
            out_dir,
        } => cmd_pipeline(&ctx, graph, env, *strategy, *alignment, out_dir),
        Cmd::Ops { json } => cmd_ops(*json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dyndag: {e}");
            ExitCode::from(e.code())
        }
    }
}
