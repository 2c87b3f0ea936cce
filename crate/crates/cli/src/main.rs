use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use samkit::bench;
use samkit::custard::{lower, parse_einsum, reference_eval, var_dims, Assignment, CompiledGraph, LowerOptions};
use samkit::graph::{from_dot, to_dot};
use samkit::sim::{SimConfig, SimReport};
use samkit::storage::{
    from_levels, gen_blocks, gen_runs, gen_sparse, gen_urandom, load_frostt, load_matrix_market, to_levels,
    write_frostt, write_matrix_market, DenseTensor, LevelFormat, TensorStorage,
};

const SCHEDULE_TAG: &str = "// schedule:";

/// Sparse dataflow graphs: compile, simulate, verify and benchmark.
#[derive(Parser)]
#[command(name = "samkit", version)]
struct Cli {
    /// Seed for every generator and random input.
    #[arg(long, global = true, env = "SAMKIT_SEED", default_value_t = 1)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lower an index expression to a graph in DOT form.
    Compile {
        #[command(flatten)]
        spec: ExprSpec,
        /// Write the graph here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Simulate a compiled graph on tensors read from files.
    Run {
        #[arg(short, long)]
        graph: PathBuf,
        /// Input binding `NAME=path.mtx`, `NAME=path.tns` or `NAME=number`.
        #[arg(short, long = "tensor")]
        tensors: Vec<String>,
        /// Directory for the output tensor and report.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Channel capacity; unbounded by default.
        #[arg(long)]
        capacity: Option<usize>,
    },
    /// Check simulated results against the dense reference.
    Verify {
        #[command(flatten)]
        spec: ExprSpec,
        /// Read the graph from a DOT file instead of compiling.
        #[arg(short, long, conflicts_with = "table")]
        graph: Option<PathBuf>,
        /// Check every expression of the primitive-count table.
        #[arg(long)]
        table: bool,
        /// Input bindings; random inputs are drawn when none are given.
        #[arg(short, long = "tensor")]
        tensors: Vec<String>,
        /// Number of random seeds to try.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Largest random index extent.
        #[arg(long, default_value_t = 12)]
        max_dim: usize,
    },
    /// Generate synthetic tensors.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Turn a report.json into per-channel CSV.
    Stats {
        report: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run one of the built-in studies and print CSV.
    Bench {
        study: Study,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Matrices for the token breakdown, `NAME=path.mtx`; synthetic
        /// stand-ins are used when none are given.
        #[arg(long = "matrix")]
        matrices: Vec<String>,
    },
}

#[derive(Args)]
struct ExprSpec {
    /// Index expression, e.g. `x(i) = B(i,j) * c(j)`.
    #[arg(short, long)]
    expr: Option<String>,
    /// Level formats, e.g. `B:ds,c:s`. Unlisted inputs are compressed.
    #[arg(short, long, default_value = "")]
    formats: String,
    /// Loop order, e.g. `i,k,j` or `ikj`. Defaults to first appearance.
    #[arg(long)]
    order: Option<String>,
    /// Let intersections send skip hints to their scanners.
    #[arg(long)]
    skip: bool,
    /// Look up a level with a locate block, `TENSOR:var`.
    #[arg(long)]
    locate: Vec<String>,
}

#[derive(Subcommand)]
enum GenKind {
    /// Uniform-random dense tensor sparsified to the given fraction of zeros.
    Sparse {
        #[arg(long, value_delimiter = ',', required = true)]
        shape: Vec<usize>,
        #[arg(long)]
        sparsity: f64,
        #[arg(long, default_value_t = 9)]
        max_val: u32,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Vector with `nnz` uniformly placed nonzeros.
    Urandom {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        nnz: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Vector pair `b`, `c` with nonzeros in runs of the given length.
    Runs {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        nnz: usize,
        #[arg(long)]
        run_len: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Vector pair `b`, `c` with nonzeros in dense blocks.
    Blocks {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        nnz: usize,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Table1,
    Fig11,
    Fig12,
    Fig13a,
    Fig13b,
    Fig13c,
    Fig14,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Compile { spec, out } => {
            let cg = compile(&spec)?;
            emit(out.as_deref(), &dot_with_schedule(&cg))?;
        }
        Cmd::Run { graph, tensors, out_dir, capacity } => run(&graph, &tensors, out_dir.as_deref(), capacity)?,
        Cmd::Verify { spec, graph, table, tensors, seeds, max_dim } => {
            return verify(spec, graph, table, &tensors, seed, seeds, max_dim);
        }
        Cmd::Gen { kind } => generate(kind, seed)?,
        Cmd::Stats { report, out } => {
            let text = fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let rep: SimReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", report.display()))?;
            eprintln!("{}: {} cycles", rep.graph, rep.cycles);
            emit(out.as_deref(), &bench::to_csv(&bench::channel_rows(&rep))?)?;
        }
        Cmd::Bench { study, out, matrices } => emit(out.as_deref(), &run_study(study, &matrices, seed)?)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_order(s: &str) -> Vec<String> {
    bench::schedule(s)
}

fn compile(spec: &ExprSpec) -> Result<CompiledGraph> {
    let expr = spec.expr.as_deref().ok_or_else(|| anyhow!("missing --expr"))?;
    let a = parse_einsum(expr)?;
    let order = spec.order.as_deref().map(parse_order).unwrap_or_else(|| a.vars());
    let inputs: BTreeSet<String> = a.inputs().into_iter().collect();
    let mut formats = BTreeMap::new();
    for item in spec.formats.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (t, f) = item.split_once(':').ok_or_else(|| anyhow!("format `{item}` is not `TENSOR:levels`"))?;
        if t == a.output.tensor {
            // results are always written compressed
            if f.chars().any(|c| c != 's') {
                eprintln!("note: output `{t}` is written compressed; format `{f}` ignored");
            }
            continue;
        }
        if !inputs.contains(t) {
            bail!("format given for unknown tensor `{t}`");
        }
        formats.insert(t.to_string(), LevelFormat::parse_list(f)?);
    }
    let mut locate = BTreeSet::new();
    for item in &spec.locate {
        let (t, v) = item.split_once(':').ok_or_else(|| anyhow!("locate `{item}` is not `TENSOR:var`"))?;
        locate.insert((t.to_string(), v.to_string()));
    }
    Ok(lower(&a, &order, &formats, &LowerOptions { skip: spec.skip, locate })?)
}

fn dot_with_schedule(cg: &CompiledGraph) -> String {
    let dot = to_dot(&cg.graph);
    let (head, rest) = dot.split_once('\n').unwrap_or((&dot, ""));
    format!("{head}\n{SCHEDULE_TAG} {}\n{rest}", cg.schedule.join(","))
}

fn load_graph(path: &Path) -> Result<CompiledGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let graph = from_dot(&text).with_context(|| format!("parsing {}", path.display()))?;
    let a = parse_einsum(&graph.name).with_context(|| format!("graph name `{}` is not an expression", graph.name))?;
    let schedule = text
        .lines()
        .find_map(|l| l.trim().strip_prefix(SCHEDULE_TAG))
        .map(|s| parse_order(s.trim()))
        .unwrap_or_else(|| a.vars());
    Ok(CompiledGraph::from_graph(graph, a, &schedule)?)
}

fn load_tensor(name: &str, src: &str) -> Result<DenseTensor> {
    if let Ok(v) = src.parse::<f64>() {
        return Ok(DenseTensor::from_vec(&[], vec![v])?);
    }
    let path = Path::new(src);
    let t = match path.extension().and_then(|e| e.to_str()) {
        Some("mtx") => load_matrix_market(path),
        Some("tns") => load_frostt(path),
        _ => bail!("`{src}`: expected a .mtx or .tns file or a number"),
    }
    .with_context(|| format!("loading {name} from {src}"))?;
    Ok(from_levels(&t))
}

/// Loads every binding and grows coordinate-list inputs, whose extents are
/// only known up to their last nonzero, to the extents the others agree on.
fn load_inputs(a: &Assignment, bindings: &[String]) -> Result<BTreeMap<String, DenseTensor>> {
    let mut raw = BTreeMap::new();
    for b in bindings {
        let (name, src) = b.split_once('=').ok_or_else(|| anyhow!("binding `{b}` is not `NAME=source`"))?;
        raw.insert(name.to_string(), load_tensor(name, src)?);
    }
    for t in a.inputs() {
        if !raw.contains_key(&t) {
            bail!("no binding for input `{t}`");
        }
    }
    let mut ext: BTreeMap<String, usize> = BTreeMap::new();
    for acc in a.rhs.accesses() {
        let t = &raw[&acc.tensor];
        if t.order() != acc.vars.len() {
            bail!("`{}` has order {}, the expression uses {}", acc.tensor, t.order(), acc.vars.len());
        }
        for (v, &d) in acc.vars.iter().zip(&t.shape) {
            let e = ext.entry(v.clone()).or_default();
            *e = (*e).max(d);
        }
    }
    let mut out = BTreeMap::new();
    for acc in a.rhs.accesses() {
        let shape: Vec<usize> = acc.vars.iter().map(|v| ext[v]).collect();
        out.insert(acc.tensor.clone(), pad(&raw[&acc.tensor], &shape)?);
    }
    var_dims(a, &out)?;
    Ok(out)
}

fn pad(t: &DenseTensor, shape: &[usize]) -> Result<DenseTensor> {
    if t.shape == shape {
        return Ok(t.clone());
    }
    let mut p = DenseTensor::zeros(shape);
    for (idx, v) in t.nonzeros() {
        p.set(&idx, v);
    }
    Ok(p)
}

fn tensor_text(name: &str, d: &DenseTensor) -> Result<(String, &'static str)> {
    if d.order() == 0 {
        return Ok((format!("{}\n", d.data[0]), "txt"));
    }
    let t = to_levels(name, d, &vec![LevelFormat::Compressed; d.order()])?;
    Ok(if d.order() == 2 { (write_matrix_market(&t), "mtx") } else { (write_frostt(&t), "tns") })
}

fn write_storage(t: &TensorStorage, path: &Path) -> Result<()> {
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some("mtx") if t.order() == 2 => write_matrix_market(t),
        Some("mtx") => bail!("{}: Matrix Market holds matrices only", path.display()),
        Some("tns") => write_frostt(t),
        _ => bail!("{}: expected a .mtx or .tns extension", path.display()),
    };
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(graph: &Path, bindings: &[String], out_dir: Option<&Path>, capacity: Option<usize>) -> Result<()> {
    let cg = load_graph(graph)?;
    let inputs = load_inputs(&cg.assignment, bindings)?;
    let cfg = SimConfig { capacity, ..Default::default() };
    let (x, report) = cg.simulate(&inputs, &cfg)?;
    let name = &cg.assignment.output.tensor;
    let (text, ext) = tensor_text(name, &x)?;
    eprintln!("{}: {} cycles, {} nonzeros", report.graph, report.cycles, x.nnz());
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join(format!("{name}.{ext}")), text)?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn describe(name: &str, d: &DenseTensor) -> String {
    if d.data.len() <= 64 {
        let vals: Vec<String> = d.data.iter().map(|v| v.to_string()).collect();
        format!("{name} = [{}]", vals.join(", "))
    } else {
        format!("{name} has {} nonzeros", d.nnz())
    }
}

/// Compares whole-stream evaluation and simulation with the reference.
/// Returns a description of the first disagreement.
fn check(cg: &CompiledGraph, inputs: &BTreeMap<String, DenseTensor>) -> std::result::Result<DenseTensor, String> {
    let want = reference_eval(&cg.assignment, inputs).map_err(|e| format!("reference: {e}"))?;
    let ev = cg.evaluate(inputs).map_err(|e| format!("evaluation: {e}"))?;
    let (sim, _) = cg.simulate(inputs, &SimConfig::default()).map_err(|e| format!("simulation: {e}"))?;
    let name = &cg.assignment.output.tensor;
    if ev != want {
        Err(format!("evaluation gives {}, reference {}", describe(name, &ev), describe(name, &want)))
    } else if sim != want {
        Err(format!("simulation gives {}, reference {}", describe(name, &sim), describe(name, &want)))
    } else {
        Ok(want)
    }
}

fn verify(
    spec: ExprSpec,
    graph: Option<PathBuf>,
    table: bool,
    bindings: &[String],
    seed: u64,
    seeds: u64,
    max_dim: usize,
) -> Result<ExitCode> {
    let graphs: Vec<CompiledGraph> = if table {
        bench::TABLE1
            .iter()
            .map(|(_, e, o)| bench::compile(e, o, &[], &LowerOptions::default()))
            .collect::<Result<_, _>>()?
    } else if let Some(g) = graph {
        vec![load_graph(&g)?]
    } else if spec.expr.is_some() {
        vec![compile(&spec)?]
    } else {
        bail!("give an expression, a graph or --table");
    };
    let mut failed = 0;
    for cg in &graphs {
        let expr = cg.assignment.to_string();
        if !bindings.is_empty() {
            let inputs = load_inputs(&cg.assignment, bindings)?;
            match check(cg, &inputs) {
                Ok(x) => println!("pass: {}", describe(&cg.assignment.output.tensor, &x)),
                Err(msg) => {
                    println!("FAIL: {expr}: {msg}");
                    failed += 1;
                }
            }
            continue;
        }
        let mut bad = None;
        for s in seed..seed + seeds {
            let inputs = bench::random_inputs(&expr, s, max_dim, (0.5, 0.95))?;
            if let Err(msg) = check(cg, &inputs) {
                bad = Some(format!("seed {s}: {msg}"));
                break;
            }
        }
        match bad {
            None => println!("pass: {expr} ({seeds} seeds)"),
            Some(msg) => {
                println!("FAIL: {expr}: {msg}");
                failed += 1;
            }
        }
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn generate(kind: GenKind, seed: u64) -> Result<()> {
    match kind {
        GenKind::Sparse { shape, sparsity, max_val, out } => {
            if !(0.0..=1.0).contains(&sparsity) {
                bail!("sparsity must lie in [0, 1]");
            }
            let d = gen_sparse(&shape, sparsity, max_val, seed);
            let name = out.file_stem().and_then(|s| s.to_str()).unwrap_or("T");
            write_storage(&to_levels(name, &d, &vec![LevelFormat::Compressed; shape.len()])?, &out)
        }
        GenKind::Urandom { dim, nnz, out } => write_storage(&gen_urandom("b", dim, nnz, seed)?, &out),
        GenKind::Runs { dim, nnz, run_len, out_dir } => write_pair(gen_runs(dim, nnz, run_len, seed)?, &out_dir),
        GenKind::Blocks { dim, nnz, block, out_dir } => write_pair(gen_blocks(dim, nnz, block, seed)?, &out_dir),
    }
}

fn write_pair((b, c): (TensorStorage, TensorStorage), dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_storage(&b, &dir.join("b.tns"))?;
    write_storage(&c, &dir.join("c.tns"))
}

fn run_study(study: Study, matrices: &[String], seed: u64) -> Result<String> {
    Ok(match study {
        Study::Table1 => bench::to_csv(&bench::table1()?)?,
        Study::Fig11 => bench::to_csv(&bench::fig11(250, &[1, 10, 100], 0.95, seed)?)?,
        Study::Fig12 => bench::to_csv(&bench::fig12(250, 100, 250, 0.95, seed)?)?,
        Study::Fig13a => bench::to_csv(&bench::fig13a(seed)?)?,
        Study::Fig13b => bench::to_csv(&bench::fig13b(seed)?)?,
        Study::Fig13c => bench::to_csv(&bench::fig13c(seed)?)?,
        Study::Fig14 => {
            let mats = if matrices.is_empty() {
                bench::fig14_standins(seed)?
            } else {
                let mut v = Vec::new();
                for m in matrices {
                    let (name, path) = m.split_once('=').unwrap_or((m.as_str(), m.as_str()));
                    let t = load_matrix_market(Path::new(path)).with_context(|| format!("loading {path}"))?;
                    v.push((name.to_string(), t));
                }
                v
            };
            bench::to_csv(&bench::fig14(&mats)?)?
        }
    })
}
