use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use dpsde::harness::{self, Cell, Experiment, RunContext, SweepSpec};
use dpsde::privacy::{self, CalibrationMode};
use dpsde::rng::stream;
use dpsde::sde::{euler_maruyama, SdeLabel};
use dpsde::optimizers::{run_optimizer_rng, RecordOptions};
use dpsde::theory::{self, BoundInputs};

#[derive(Debug, Parser)]
#[command(name = "dpsde", version, about = "Private optimizers, their SDE models and Monte-Carlo experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Debug, Args)]
struct Global {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the expanded cell list and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Worker threads for the harness pool.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write per-trajectory CSVs and JSON sidecars into this directory.
    #[arg(long, global = true, value_name = "DIR")]
    save_trajectories: Option<PathBuf>,
    /// Batch sampling scheme: poisson or shuffle.
    #[arg(long, global = true)]
    sampling: Option<String>,
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one trajectory of an optimizer or of an SDE model.
    Simulate(SimulateArgs),
    /// Run a sweep described by a configuration file.
    Sweep(SweepArgs),
    /// Convert between a privacy budget and a noise multiplier.
    Accountant(AccountantArgs),
    /// Evaluate the closed-form bounds for one configuration.
    Theory(TheoryArgs),
    /// Privacy budget above which DP-SGD beats DP-SignSGD.
    Epsstar(EpsstarArgs),
    /// Compare discrete and SDE ensembles.
    ValidateSde(SweepArgs),
    /// Compare iterate moments with the stationary laws.
    Stationary(SweepArgs),
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Output directory for results.csv and manifest.json.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    record_every: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// dpsgd, dpsignsgd or dpadam.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long = "C")]
    clip: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Privacy budget; `inf` disables the mechanism.
    #[arg(long, conflicts_with = "sigma")]
    epsilon: Option<String>,
    /// Noise multiplier.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    sigma_gamma: Option<f64>,
    /// Calibration mode: analytic or rdp.
    #[arg(long)]
    mode: Option<String>,
    /// Diagonal Hessian of a quadratic objective, comma separated.
    #[arg(long, value_delimiter = ',')]
    diag: Option<Vec<f64>>,
    /// Constant initial point.
    #[arg(long)]
    x0: Option<f64>,
    #[arg(long)]
    record_every: Option<u64>,
    /// Simulate this SDE model instead of the optimizer.
    #[arg(long)]
    sde: Option<String>,
    /// Clip fraction for mixed SDE models.
    #[arg(long)]
    mixed_p: Option<f64>,
    /// Directory for the trajectory CSV and sidecar.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AccountantArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    batch: usize,
    #[arg(long, conflicts_with = "steps")]
    epochs: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    delta: f64,
    #[arg(long, conflicts_with = "epsilon")]
    sigma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value = "analytic")]
    mode: String,
}

#[derive(Debug, Args)]
struct TheoryArgs {
    /// Evaluation time; defaults to τ = ηT.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Debug, Args)]
struct EpsstarArgs {
    #[arg(long = "C")]
    clip: f64,
    #[arg(long = "T", conflicts_with = "epochs")]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    sigma_gamma: f64,
    #[arg(long)]
    delta: f64,
}

/// Exit-code class of a failure.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate(a) => simulate(g, a),
        Command::Sweep(a) => sweep(g, a, None),
        Command::ValidateSde(a) => sweep(g, a, Some(Experiment::SdeValidate)),
        Command::Stationary(a) => sweep(g, a, Some(Experiment::Stationary)),
        Command::Accountant(a) => accountant(g, a),
        Command::Theory(a) => theory_cmd(g, a),
        Command::Epsstar(a) => epsstar(g, a),
    }
}

fn load_json(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("invalid JSON in {}: {e}", path.display())))
}

fn set(doc: &mut Value, key: &str, v: Option<Value>) {
    if let (Some(v), Some(obj)) = (v, doc.as_object_mut()) {
        obj.insert(key.to_string(), v);
    }
}

fn echo_config(doc: &Value) {
    eprintln!("resolved config: {doc}");
}

fn prepare_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"")
        .map_err(|e| Failure::Runtime(format!("output directory {} is not writable: {e}", dir.display())))?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

fn print_json(v: &Value) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(runtime_err)?;
    writeln!(out).map_err(runtime_err)
}

fn print_csv(header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    w.write_record(header).map_err(runtime_err)?;
    for r in rows {
        w.write_record(r).map_err(runtime_err)?;
    }
    w.flush().map_err(runtime_err)
}

fn print_cells(cells: &[Cell], format: Format) -> Result<(), Failure> {
    match format {
        Format::Json => print_json(&serde_json::to_value(cells).map_err(runtime_err)?),
        Format::Csv => {
            let rows: Vec<Vec<String>> = cells
                .iter()
                .map(|c| {
                    vec![
                        c.index.to_string(),
                        c.stream.to_string(),
                        c.method.name().to_string(),
                        harness::fmt_f64(c.epsilon),
                        harness::fmt_f64(c.sigma_dp),
                        harness::fmt_f64(c.eta),
                        harness::fmt_f64(c.clip),
                        c.batch.to_string(),
                        c.steps.to_string(),
                        u8::from(c.extension).to_string(),
                    ]
                })
                .collect();
            print_csv(
                &["cell", "stream", "method", "epsilon", "sigma_dp", "eta", "C", "B", "T", "extension"],
                &rows,
            )
        }
    }
}

/// Applies flag overrides onto the config document, then validates it.
fn resolve_spec(doc: Value) -> Result<(SweepSpec, Value), Failure> {
    let spec: SweepSpec = serde_json::from_value(doc).map_err(|e| Failure::Config(format!("schema violation: {e}")))?;
    spec.validate().map_err(|e| Failure::Config(format!("schema violation: {e}")))?;
    let resolved = serde_json::to_value(&spec).map_err(runtime_err)?;
    Ok((spec, resolved))
}

fn context(g: &Global) -> RunContext {
    RunContext {
        workers: g.workers,
        progress: true,
        trajectories: g.save_trajectories.clone(),
    }
}

fn sweep(g: &Global, a: &SweepArgs, force: Option<Experiment>) -> Result<(), Failure> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("this subcommand needs --config <PATH>".into()))?;
    let mut doc = load_json(path)?;
    if !doc.is_object() {
        return Err(Failure::Config(format!("config {} must be a JSON object", path.display())));
    }
    if let Some(exp) = force {
        set(&mut doc, "experiment", Some(json!(exp)));
    }
    set(&mut doc, "seed", g.seed.map(|v| json!(v)));
    set(&mut doc, "sampling", g.sampling.as_ref().map(|v| json!(v)));
    set(&mut doc, "output", a.output.as_ref().map(|v| json!(v)));
    set(&mut doc, "reps", a.reps.map(|v| json!(v)));
    set(&mut doc, "steps", a.steps.map(|v| json!(v)));
    set(&mut doc, "record_every", a.record_every.map(|v| json!(v)));
    let (spec, resolved) = resolve_spec(doc)?;
    echo_config(&resolved);
    let cells = harness::expand_cells(&spec).map_err(config_err)?;
    if g.dry_run {
        return print_cells(&cells, g.format);
    }
    if let Some(dir) = &spec.output {
        prepare_dir(dir)?;
    }
    if let Some(dir) = &g.save_trajectories {
        prepare_dir(dir)?;
    }
    let report = harness::run_sweep(&spec, &context(g)).map_err(runtime_err)?;
    match (&spec.output, g.format) {
        (Some(dir), _) => print_json(&json!({
            "experiment": spec.experiment.name(),
            "cells": cells.len(),
            "rows": report.rows().len(),
            "results": dir.join("results.csv"),
            "manifest": dir.join("manifest.json"),
        })),
        (None, Format::Json) => print_json(&serde_json::to_value(&report).map_err(runtime_err)?),
        (None, Format::Csv) => harness::write_results(std::io::stdout().lock(), report.rows()).map_err(runtime_err),
    }
}

fn simulate_defaults() -> Value {
    json!({
        "experiment": "speed",
        "objective": {"kind": "quadratic", "diag": {"d": 16, "value": 1.0}},
        "x0": {"fill": 1.0},
        "methods": ["dpsgd"],
        "eta": [0.01],
        "C": [1.0],
        "B": [1],
        "epsilon": ["inf"],
        "n": 1000,
        "delta": 1e-5,
        "sigma_gamma": 0.1,
        "steps": 1000,
        "reps": 1
    })
}

fn simulate(g: &Global, a: &SimulateArgs) -> Result<(), Failure> {
    let mut doc = match &g.config {
        Some(p) => load_json(p)?,
        None => simulate_defaults(),
    };
    if !doc.is_object() {
        return Err(Failure::Config("config must be a JSON object".into()));
    }
    set(&mut doc, "seed", g.seed.map(|v| json!(v)));
    set(&mut doc, "sampling", g.sampling.as_ref().map(|v| json!(v)));
    set(&mut doc, "methods", a.method.as_ref().map(|v| json!([v])));
    set(&mut doc, "eta", a.eta.map(|v| json!([v])));
    set(&mut doc, "steps", a.steps.map(|v| json!(v)));
    set(&mut doc, "C", a.clip.map(|v| json!([v])));
    set(&mut doc, "B", a.batch.map(|v| json!([v])));
    set(&mut doc, "n", a.n.map(|v| json!(v)));
    set(&mut doc, "delta", a.delta.map(|v| json!(v)));
    set(&mut doc, "sigma_gamma", a.sigma_gamma.map(|v| json!(v)));
    set(&mut doc, "calibration", a.mode.as_ref().map(|v| json!(v)));
    set(&mut doc, "record_every", a.record_every.map(|v| json!(v)));
    if let Some(h) = &a.diag {
        set(&mut doc, "objective", Some(json!({"kind": "quadratic", "diag": h})));
    }
    set(&mut doc, "x0", a.x0.map(|v| json!({"fill": v})));
    if let Some(e) = &a.epsilon {
        let budget = e.parse::<f64>().map(|v| json!(v)).unwrap_or_else(|_| json!(e));
        let obj = doc.as_object_mut().expect("object");
        obj.remove("sigma");
        obj.insert("epsilon".into(), json!([budget]));
    }
    if let Some(s) = a.sigma {
        let obj = doc.as_object_mut().expect("object");
        obj.remove("epsilon");
        obj.insert("sigma".into(), json!([s]));
    }
    let (spec, mut resolved) = resolve_spec(doc)?;
    let sde = a
        .sde
        .as_ref()
        .map(|s| serde_json::from_value::<SdeLabel>(json!(s)).map_err(|_| Failure::Config(format!("unknown SDE model '{s}'"))))
        .transpose()?;
    if let Some(m) = resolved.as_object_mut() {
        m.insert("sde_model".into(), json!(sde));
        m.insert("mixed_p".into(), json!(a.mixed_p));
    }
    echo_config(&resolved);
    let cells = harness::expand_cells(&spec).map_err(config_err)?;
    if g.dry_run {
        return print_cells(&cells[..1], g.format);
    }
    let cell = cells[0];
    let obj = spec.objective.build().map_err(config_err)?;
    let x0 = spec.x0.build(obj.dim()).map_err(config_err)?;
    let privacy = spec
        .privacy(cell.privacy_index, cell.batch, cell.clip, cell.steps)
        .map_err(config_err)?;
    let cfg = spec.optimizer_config(cell.method, cell.eta, privacy).map_err(config_err)?;
    let mut rng = stream(spec.seed, 0, 0);
    let rec = match sde {
        None => run_optimizer_rng(&obj, &cfg, &x0, cell.steps, RecordOptions::every(spec.record_every), &mut rng),
        Some(label) => harness::build_model(label, &obj, &cfg, a.mixed_p, spec.sde.phase1_samples).and_then(|m| {
            euler_maruyama(&m, &x0, cell.eta, cell.steps, RecordOptions::every(spec.record_every), &mut rng)
        }),
    };
    let mut rec = rec.map_err(runtime_err)?;
    rec.seed = spec.seed;
    if let Some(dir) = a.output.as_ref().or(g.save_trajectories.as_ref()) {
        prepare_dir(dir)?;
        rec.save(dir, "trajectory").map_err(runtime_err)?;
    }
    match g.format {
        Format::Json => print_json(&serde_json::to_value(&rec).map_err(runtime_err)?),
        Format::Csv => rec.write_csv_to(&mut std::io::stdout().lock()).map_err(runtime_err),
    }
}

fn print_object(obj: &Map<String, Value>, format: Format) -> Result<(), Failure> {
    match format {
        Format::Json => print_json(&Value::Object(obj.clone())),
        Format::Csv => {
            let header: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
            let row: Vec<String> = obj
                .values()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            print_csv(&header, &[row])
        }
    }
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(harness::fmt_f64(v))
    }
}

fn accountant(g: &Global, a: &AccountantArgs) -> Result<(), Failure> {
    let mode: CalibrationMode = a.mode.parse().map_err(config_err)?;
    let steps = match (a.steps, a.epochs) {
        (Some(t), _) => t,
        (None, Some(e)) => privacy::steps_from_epochs(a.n, a.batch, e),
        (None, None) => return Err(Failure::Config("give --steps or --epochs".into())),
    };
    let mut resolved = Map::new();
    resolved.insert("n".into(), json!(a.n));
    resolved.insert("batch".into(), json!(a.batch));
    resolved.insert("T".into(), json!(steps));
    resolved.insert("delta".into(), json!(a.delta));
    resolved.insert("sigma".into(), json!(a.sigma));
    resolved.insert("epsilon".into(), json!(a.epsilon));
    resolved.insert("mode".into(), json!(mode));
    resolved.insert("seed".into(), json!(g.seed));
    echo_config(&Value::Object(resolved));
    let p = match (a.sigma, a.epsilon) {
        (Some(s), None) => privacy::PrivacyParams::from_sigma(s, a.delta, a.n, a.batch, steps, 1.0, mode),
        (None, Some(e)) => privacy::PrivacyParams::from_epsilon(e, a.delta, a.n, a.batch, steps, 1.0, mode),
        _ => return Err(Failure::Config("give exactly one of --sigma or --epsilon".into())),
    }
    .map_err(config_err)?;
    let mut out = Map::new();
    out.insert("epsilon".into(), num(p.epsilon));
    out.insert("sigma".into(), num(p.sigma_dp));
    out.insert("q".into(), json!(p.q));
    out.insert("T".into(), json!(p.steps));
    out.insert("phi".into(), json!(p.phi));
    print_object(&out, g.format)
}

fn epsstar(g: &Global, a: &EpsstarArgs) -> Result<(), Failure> {
    let steps = match (a.steps, a.epochs) {
        (Some(t), _) => t,
        (None, Some(e)) => privacy::steps_from_epochs(a.n, a.batch, e),
        (None, None) => return Err(Failure::Config("give --T or --epochs".into())),
    };
    echo_config(&json!({
        "C": a.clip, "T": steps, "batch": a.batch, "n": a.n,
        "sigma_gamma": a.sigma_gamma, "delta": a.delta, "seed": g.seed,
    }));
    let es = privacy::epsilon_star(a.clip, steps, a.batch, a.n, a.sigma_gamma, a.delta).map_err(config_err)?;
    let mut out = Map::new();
    out.insert("epsilon_star".into(), num(es));
    print_object(&out, g.format)
}

fn theory_cmd(g: &Global, a: &TheoryArgs) -> Result<(), Failure> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("theory needs --config <PATH>".into()))?;
    let mut doc = load_json(path)?;
    set(&mut doc, "epsilon", a.epsilon.map(|v| json!(v)));
    set(&mut doc, "eta", a.eta.map(|v| json!(v)));
    set(&mut doc, "t", a.t.map(|v| json!(v)));
    let obj = doc
        .as_object()
        .ok_or_else(|| Failure::Config(format!("config {} must be a JSON object", path.display())))?;
    let mut inputs = obj.clone();
    let t = inputs.remove("t").map(|v| v.as_f64().ok_or_else(|| Failure::Config("t must be a number".into()))).transpose()?;
    let h = inputs.remove("h");
    let x0 = inputs.remove("x0");
    let infinite = matches!(inputs.get("epsilon"), Some(Value::String(s)) if s.eq_ignore_ascii_case("inf"));
    if infinite {
        inputs.insert("epsilon".into(), json!(1.0));
    }
    let has_sigma = inputs.contains_key("sigma_dp");
    let mut inp: BoundInputs = serde_json::from_value(Value::Object(inputs))
        .map_err(|e| Failure::Config(format!("schema violation: {e}")))?;
    if infinite {
        inp.epsilon = f64::INFINITY;
    }
    if !has_sigma {
        inp = inp.calibrated().map_err(config_err)?;
    }
    let t = t.unwrap_or(inp.tau());
    echo_config(&json!({ "inputs": inp, "t": t, "seed": g.seed }));
    let rep = theory::report(&inp, t).map_err(config_err)?;
    let mut out = serde_json::to_value(&rep).map_err(runtime_err)?;
    if let (Some(h), Some(x0)) = (h, x0) {
        let h: Vec<f64> = serde_json::from_value(h).map_err(|e| Failure::Config(format!("h: {e}")))?;
        let x0: Vec<f64> = serde_json::from_value(x0).map_err(|e| Failure::Config(format!("x0: {e}")))?;
        let sgd = theory::stationary_sgd(&h, &x0, &inp, t).map_err(config_err)?;
        let sign = theory::stationary_sign(&h, &x0, &inp, t).map_err(config_err)?;
        if let Some(m) = out.as_object_mut() {
            m.insert("stationary_sgd".into(), serde_json::to_value(sgd).map_err(runtime_err)?);
            m.insert("stationary_sign".into(), serde_json::to_value(sign).map_err(runtime_err)?);
        }
    }
    match g.format {
        Format::Json => print_json(&out),
        Format::Csv => {
            let mut flat = Map::new();
            flatten("", &out, &mut flat);
            print_object(&flat, Format::Csv)
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}
