use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use cipmeta::config_space::{condensation_profile_from_graph, ConfigSpace, DPolicy, DEFAULT_BUDGET};
use cipmeta::graph_model::{contract_graph, metastable_hierarchy, SiteGraph};
use cipmeta::ladder_resolvent::{
    default_lambda, kconstant_auto, partial_sum_differences, partial_sums, solve_resolvent,
    verify_g_identities, DEFAULT_DEPTH,
};
use cipmeta::simulator::{empirical_vs_magic, timescale_census, SimConfig, DEFAULT_MAX_EVENTS};
use cipmeta::test_objects::{
    build_test_flow, capacity_sandwich, flow_norm_and_bound, max_depth_for, CutoffChoice,
    SandwichOptions,
};
use cipmeta::{Error, Result};

#[derive(Parser)]
#[command(name = "cipmeta", version, about = "Metastable hierarchy and capacity bounds for the inclusion process")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hierarchy of condensed states and second-scale constants.
    Analyze(Common),
    /// Third-scale constant K_xy from the ladder resolvent.
    Kconstant(KArgs),
    /// Thomson / exact / Dirichlet capacity triple over an N sweep.
    Capacity(CapArgs),
    /// Residual tables for the resolvent, test function and test flow.
    VerifyTestObjects(CapArgs),
    /// Simulated hitting times against the magic formula.
    Simulate(SimArgs),
    /// Condensation profile and time-scale census over an N sweep.
    Sweep(SweepArgs),
    /// Collects the artifacts of a run directory into report.md.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Graph JSON: {"sites": [...], "rates": [[from, to, rate], ...], "measure": [[site, m], ...]?}
    #[arg(long)]
    graph: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Pair {
    /// Source condensate site (defaults to the first site of S⋆).
    #[arg(long)]
    x: Option<String>,
    /// Target condensate site (defaults to the second site of S⋆).
    #[arg(long)]
    y: Option<String>,
}

#[derive(Args, Clone)]
struct KArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pair: Pair,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated λ values; one row each plus a spread row.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f64>,
    /// Starting ladder depth for depth doubling.
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    depth: usize,
}

#[derive(Args, Clone)]
struct DArgs {
    /// Constant diffusion parameter d_N.
    #[arg(long, conflicts_with = "d_schedule")]
    d: Option<f64>,
    /// Use d_N = c / log(N + e).
    #[arg(long)]
    d_schedule: Option<f64>,
}

impl DArgs {
    fn policy(&self) -> DPolicy {
        match (self.d, self.d_schedule) {
            (_, Some(c)) => DPolicy::Schedule(c),
            (Some(c), None) => DPolicy::Constant(c),
            (None, None) => DPolicy::Constant(0.05),
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum Cutoff {
    Best,
    Formula,
}

#[derive(Args, Clone)]
struct CapArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pair: Pair,
    #[command(flatten)]
    dargs: DArgs,
    /// Comma-separated particle numbers, ascending.
    #[arg(long, value_delimiter = ',', default_value = "20,40")]
    n: Vec<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Test-flow depth L (default: best admissible depth).
    #[arg(long)]
    flow_depth: Option<usize>,
    /// Test-function cutoff: the best admissible one or the asymptotic formula.
    #[arg(long, value_enum, default_value = "best")]
    cutoff: Cutoff,
    /// Fixed even cutoff N′; overrides --cutoff.
    #[arg(long)]
    n_prime: Option<usize>,
    /// Largest configuration space to enumerate.
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
}

impl CapArgs {
    fn options(&self) -> SandwichOptions {
        SandwichOptions {
            lambda: self.lambda,
            flow_depth: self.flow_depth,
            cutoff: match (self.n_prime, self.cutoff) {
                (Some(np), _) => CutoffChoice::Fixed(np),
                (None, Cutoff::Best) => CutoffChoice::Best,
                (None, Cutoff::Formula) => CutoffChoice::Formula,
            },
            budget: Some(self.budget),
        }
    }
}

#[derive(Args, Clone)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pair: Pair,
    #[command(flatten)]
    dargs: DArgs,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    replicas: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_EVENTS)]
    max_events: u64,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pair: Pair,
    #[command(flatten)]
    dargs: DArgs,
    #[arg(long, value_delimiter = ',', default_value = "10,20,40,80")]
    n: Vec<usize>,
    /// Census horizon α_N as a multiple of N/d_N² (the second time scale).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    replicas: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_EVENTS)]
    max_events: u64,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
}

#[derive(Args, Clone)]
struct ReportArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_graph(path: &Path) -> Result<SiteGraph> {
    let text = fs::read_to_string(path)?;
    SiteGraph::from_json(&text)
}

fn site(g: &SiteGraph, name: &str) -> Result<usize> {
    g.index_of(name).ok_or_else(|| Error::InvalidInput(format!("unknown site {name:?}")))
}

fn resolve_pair(g: &SiteGraph, p: &Pair) -> Result<(usize, usize)> {
    let star = g.s_star();
    let x = match &p.x {
        Some(n) => site(g, n)?,
        None => *star.first().ok_or_else(|| Error::InvalidInput("S⋆ is empty".into()))?,
    };
    let y = match &p.y {
        Some(n) => site(g, n)?,
        None => *star
            .iter()
            .find(|&&v| v != x)
            .ok_or_else(|| Error::AssumptionViolated("S⋆ has a single site".into()))?,
    };
    Ok((x, y))
}

fn check_n_list(n: &[usize]) -> Result<()> {
    if n.is_empty() || n.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(format!("N list {n:?} must be nonempty and ascending")));
    }
    Ok(())
}

/// Writes one artifact and records it in the run's manifest.
fn emit(out: &Path, name: &str, body: &str, command: &str, params: Value) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(name), body)?;
    let manifest = out.join("manifest.json");
    let mut entries: Vec<Value> = match fs::read_to_string(&manifest) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => Vec::new(),
    };
    entries.push(json!({ "command": command, "artifact": name, "params": params }));
    fs::write(manifest, serde_json::to_string_pretty(&entries)? + "\n")?;
    println!("wrote {}", out.join(name).display());
    Ok(())
}

fn pretty(v: &Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Analyze(c) => analyze(&c),
        Command::Kconstant(a) => kconstant(&a),
        Command::Capacity(a) => capacity(&a),
        Command::VerifyTestObjects(a) => verify(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Report(a) => report(&a.out),
    }
}

fn analyze(c: &Common) -> Result<()> {
    let g = load_graph(&c.graph)?;
    let h = metastable_hierarchy(&g);
    let names = |v: &[usize]| v.iter().map(|&s| g.name(s).to_string()).collect::<Vec<_>>();
    let body = json!({
        "sites": g.names(),
        "measure": g.measure(),
        "balance_residual": g.balance_residual(),
        "s_star": names(&h.s_star),
        "s_zero": names(&h.s_zero),
        "kappa2": h.kappa2(),
        "kappa3": h.kappa3(),
        "level2": h.level2.iter().map(|b| names(b)).collect::<Vec<_>>(),
        "level3": h.level3.iter().map(|b| names(b)).collect::<Vec<_>>(),
        "rij": h.rij,
        "r2nd": h.r2nd,
        "m_star": h.m_star,
        "m_star_star": h.m_star_star,
        "near_degenerate": names(&h.near_degenerate),
    });
    emit(&c.out, "hierarchy.json", &pretty(&body)?, "analyze", json!({ "graph": c.graph }))
}

fn kconstant(a: &KArgs) -> Result<()> {
    let g = load_graph(&a.common.graph)?;
    let (x, y) = resolve_pair(&g, &a.pair)?;
    let cg = contract_graph(&g, x, y)?;
    let grid = if a.lambda_grid.is_empty() {
        vec![a.lambda.unwrap_or_else(|| default_lambda(&g))]
    } else {
        a.lambda_grid.clone()
    };
    let mut rows = Vec::new();
    for &lambda in &grid {
        let (k, res) = kconstant_auto(&g, &cg, lambda, a.depth)?;
        let id = verify_g_identities(&g, &cg, &res);
        rows.push(json!({
            "lambda": lambda,
            "k": k.value,
            "capacity_constant": 1.0 / (2.0 * k.value),
            "depth": k.depth,
            "depth_change": k.depth_change,
            "formula_spread": k.spread,
            "linear_residual": res.max_residual(),
            "identity_residual": id.max(),
        }));
    }
    let ks: Vec<f64> = rows.iter().map(|r| r["k"].as_f64().unwrap_or(f64::NAN)).collect();
    let (lo, hi) = ks.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &k| (l.min(k), h.max(k)));
    let body = json!({
        "x": g.name(x),
        "y": g.name(y),
        "rows": rows,
        "lambda_spread": (hi - lo) / hi,
    });
    emit(&a.common.out, "kconstant.json", &pretty(&body)?, "kconstant", json!({ "graph": a.common.graph, "lambda_grid": grid }))
}

fn capacity(a: &CapArgs) -> Result<()> {
    check_n_list(&a.n)?;
    let g = load_graph(&a.common.graph)?;
    let (x, y) = resolve_pair(&g, &a.pair)?;
    let policy = a.dargs.policy();
    let mut csv = String::from(
        "N,d_N,lower_scaled,exact_scaled,upper_scaled,k_reference,flow_depth,n_prime,upper_formula_scaled,exact_residual,flow_interior_divergence\n",
    );
    for &n in &a.n {
        let d = policy.d(n);
        let s = capacity_sandwich(&g, x, y, n, d, &a.options())?;
        writeln!(
            csv,
            "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{},{},{:.12e},{:.3e},{:.3e}",
            n,
            d,
            s.lower_scaled,
            s.exact_scaled,
            s.upper_scaled,
            s.k_reference,
            s.flow_depth,
            s.n_prime,
            s.upper_formula_scaled,
            s.exact_residual,
            s.flow_interior_divergence
        )
        .expect("write to string");
    }
    emit(&a.common.out, "sandwich.csv", &csv, "capacity", json!({ "graph": a.common.graph, "n": a.n, "d": policy }))
}

fn verify(a: &CapArgs) -> Result<()> {
    check_n_list(&a.n)?;
    let g = load_graph(&a.common.graph)?;
    let (x, y) = resolve_pair(&g, &a.pair)?;
    let cg = contract_graph(&g, x, y)?;
    let lambda = a.lambda.unwrap_or_else(|| default_lambda(&g));
    let (k, res) = kconstant_auto(&g, &cg, lambda, DEFAULT_DEPTH)?;
    let identities = verify_g_identities(&g, &cg, &res);
    let sweep = [20, 40, 80]
        .iter()
        .map(|&l| Ok(partial_sums(&g, &cg, &solve_resolvent(&g, &cg, l, lambda)?)))
        .collect::<Result<Vec<_>>>()?;
    let policy = a.dargs.policy();
    let mut points = Vec::new();
    for &n in &a.n {
        let d = policy.d(n);
        let depth = a.flow_depth.unwrap_or_else(|| max_depth_for(n)).max(1);
        let psi = build_test_flow(&g, &cg, n, depth)?;
        let scan = psi.scan();
        let fb = flow_norm_and_bound(&g, n, d, &psi)?;
        let s = capacity_sandwich(&g, x, y, n, d, &a.options())?;
        points.push(json!({
            "n": n,
            "d": d,
            "flow": {
                "depth": depth,
                "value": scan.value,
                "value_target": 1.0 / (6.0 * k.value),
                "interior_divergence_relative": scan.relative(),
                "states": scan.states,
                "edges": scan.edges,
                "norm_scaled": fb.norm * d.powi(3) / (n * n) as f64,
            },
            "sandwich": s,
        }));
    }
    let body = json!({
        "x": g.name(x),
        "y": g.name(y),
        "k": k,
        "resolvent_residual": res.max_residual(),
        "identities": identities,
        "partial_sum_differences": partial_sum_differences(&sweep),
        "points": points,
    });
    emit(&a.common.out, "verify.json", &pretty(&body)?, "verify-test-objects", json!({ "graph": a.common.graph, "n": a.n }))
}

fn simulate(a: &SimArgs) -> Result<()> {
    let g = load_graph(&a.common.graph)?;
    let (x, y) = resolve_pair(&g, &a.pair)?;
    let d = a.dargs.policy().d(a.n);
    let cs = ConfigSpace::enumerate(&g, a.n, d, a.budget)?;
    let mt = cs.stationary_measure();
    let cfg = SimConfig { seed: a.seed, replicas: a.replicas, max_events: a.max_events };
    let cmp = empirical_vs_magic(&cs, &mt, cs.condensate(x), &[cs.condensate(y)], &cfg)?;
    let mut csv = String::from("replica,time,events\n");
    for (i, (t, e)) in cmp.sample.times.iter().zip(&cmp.sample.events).enumerate() {
        writeln!(csv, "{i},{t:.12e},{e}").expect("write to string");
    }
    let params = json!({ "graph": a.common.graph, "n": a.n, "d": d, "seed": a.seed, "replicas": a.replicas });
    emit(&a.common.out, "simulate.csv", &csv, "simulate", params.clone())?;
    let summary = json!({
        "x": g.name(x),
        "y": g.name(y),
        "mean": cmp.sample.mean,
        "stderr": cmp.sample.stderr,
        "exact": cmp.exact,
        "deviation": cmp.deviation,
        "pass": cmp.pass,
    });
    emit(&a.common.out, "simulate.json", &pretty(&summary)?, "simulate", params)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    check_n_list(&a.n)?;
    let g = load_graph(&a.common.graph)?;
    let (x, _) = resolve_pair(&g, &a.pair)?;
    let h = metastable_hierarchy(&g);
    let policy = a.dargs.policy();
    let mut csv = String::from("N,d_N,site,condensate_mass,target,deviation,census_alpha,census_outside,census_start\n");
    for &n in &a.n {
        let d = policy.d(n);
        let prof = condensation_profile_from_graph(&g, n, d);
        let target = 1.0 / h.s_star.len() as f64;
        let census = match a.alpha {
            Some(mult) => {
                let cs = ConfigSpace::enumerate(&g, n, d, a.budget)?;
                let cfg = SimConfig { seed: a.seed, replicas: a.replicas, max_events: a.max_events };
                Some(timescale_census(&cs, &h, cs.condensate(x), mult * n as f64 / (d * d), &cfg)?)
            }
            None => None,
        };
        for &(s, mass) in &prof.wells {
            let (ca, co, cst) = match &census {
                Some(c) => (c.alpha.to_string(), c.outside_occupation.to_string(), c.start_occupation.to_string()),
                None => (String::new(), String::new(), String::new()),
            };
            writeln!(
                csv,
                "{n},{d},{},{mass:.12e},{target:.12e},{:.12e},{ca},{co},{cst}",
                g.name(s),
                (mass - target).abs() / target
            )
            .expect("write to string");
        }
    }
    emit(&a.common.out, "sweep.csv", &csv, "sweep", json!({ "graph": a.common.graph, "n": a.n, "d": policy }))
}

fn report(out: &Path) -> Result<()> {
    let mut md = String::from("# cipmeta report\n\n");
    let section = |md: &mut String, title: &str, body: &str| {
        let _ = write!(md, "## {title}\n\n{body}\n");
    };
    if let Ok(text) = fs::read_to_string(out.join("hierarchy.json")) {
        let v: Value = serde_json::from_str(&text)?;
        section(
            &mut md,
            "Hierarchy",
            &format!(
                "| S⋆ | κ₂ | κ₃ | level 3 blocks |\n|---|---|---|---|\n| {} | {} | {} | {} |\n",
                v["s_star"], v["kappa2"], v["kappa3"], v["level3"]
            ),
        );
    }
    if let Ok(text) = fs::read_to_string(out.join("kconstant.json")) {
        let v: Value = serde_json::from_str(&text)?;
        let mut t = String::from("| λ | K | 1/(2K) | depth | formula spread | identity residual |\n|---|---|---|---|---|---|\n");
        for r in v["rows"].as_array().into_iter().flatten() {
            let _ = writeln!(
                t,
                "| {} | {} | {} | {} | {} | {} |",
                r["lambda"], r["k"], r["capacity_constant"], r["depth"], r["formula_spread"], r["identity_residual"]
            );
        }
        let _ = writeln!(t, "\nλ spread: {}", v["lambda_spread"]);
        section(&mut md, "Capacity constant", &t);
    }
    for (file, title) in [("sandwich.csv", "Capacity sandwich"), ("sweep.csv", "Condensation sweep"), ("simulate.json", "Simulation")] {
        if let Ok(text) = fs::read_to_string(out.join(file)) {
            let body = if file.ends_with(".csv") { csv_to_markdown(&text) } else { format!("```json\n{text}```\n") };
            section(&mut md, title, &body);
        }
    }
    emit(out, "report.md", &md, "report", json!({}))
}

fn csv_to_markdown(text: &str) -> String {
    let mut lines = text.lines();
    let Some(head) = lines.next() else { return String::new() };
    let cols = head.split(',').count();
    let mut md = format!("| {} |\n|{}\n", head.replace(',', " | "), "---|".repeat(cols));
    for l in lines {
        let _ = writeln!(md, "| {} |", l.replace(',', " | "));
    }
    md
}
