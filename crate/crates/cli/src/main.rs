mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use windcf::counterfactual::{
    build_manufacturer_problem, build_operator_problem, solve_mode, CounterfactualResult, Mode,
};
use windcf::dataset::{load_csv, save_csv};
use windcf::harness::{load_timeline, replay, ReplayConfig, Summary, SUMMARY_FILE, TIMELINE_FILE};
use windcf::predictors::load_regressor;
use windcf::schema::{parse_timestamp, FeatureId, FeatureVector};
use windcf::solver::SolveStatus;
use windcf::synth::{generate, truth_path, GeneratorSpec};
use windcf::train::{train_all, ModelBundle};

use config::RunConfig;

/// Error in how the program was invoked; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "windcf",
    version,
    about = "Counterfactual set-points for wind turbines flagged by an anomaly classifier"
)]
struct Cli {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// More log output on stderr (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic SCADA series.
    Generate(GenerateArgs),
    /// Train the classifier and the temperature surrogates.
    Train(TrainArgs),
    /// Compute a counterfactual for one sample.
    Explain(ExplainArgs),
    /// Replay a date range through the controller.
    Simulate(SimulateArgs),
    /// Re-derive and check the summary of a replay directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator specification (JSON); defaults apply to missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Series length in years.
    #[arg(long)]
    years: Option<f64>,
    /// Output CSV; the ground truth goes next to it as `<name>.truth.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Share of anomalies on the training side of the temporal split.
    #[arg(long)]
    q: Option<f64>,
    /// Anomalies per good sample in the classifier training subset.
    #[arg(long)]
    ratio: Option<f64>,
    /// Cross-validation folds.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Take bounds and normalization scales from the training split only.
    #[arg(long)]
    train_stats: bool,
    /// Model bundle to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SolveFlags {
    #[arg(long)]
    mode: Option<Mode>,
    /// Score margin below the decision threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Largest transformer temperature change, degC.
    #[arg(long)]
    mdt: Option<f64>,
    /// Manufacturer-mode band around the surrogate predictions.
    #[arg(long)]
    beta: Option<f64>,
    /// Revenue-mode power increase over the operator solution.
    #[arg(long)]
    pi: Option<f64>,
    /// Energy price, EUR/MWh.
    #[arg(long)]
    price: Option<f64>,
    /// Solver time limit per problem, seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Relative optimality gap.
    #[arg(long)]
    gap: Option<f64>,
}

#[derive(Args)]
struct ExplainArgs {
    /// Model bundle from `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Replaces the bundle's nacelle surrogate.
    #[arg(long)]
    n: Option<PathBuf>,
    /// Replaces the bundle's transformer surrogate.
    #[arg(long)]
    t: Option<PathBuf>,
    /// Sample as a JSON object with timestamp, P, TN, TT, TA, WS.
    #[arg(long, conflicts_with_all = ["data", "at"])]
    instance: Option<PathBuf>,
    /// Series to take the sample from, with --at.
    #[arg(long, requires = "at")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    at: Option<String>,
    /// Write the encoded problem in LP format to this path.
    #[arg(long)]
    dump_lp: Option<PathBuf>,
    #[command(flatten)]
    solve: SolveFlags,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// First timestamp replayed.
    #[arg(long)]
    from: String,
    /// End of the range; a bare date includes that whole day.
    #[arg(long)]
    to: String,
    /// Output directory for timeline.csv and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0: one per core).
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    solve: SolveFlags,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    dir: PathBuf,
}

impl SolveFlags {
    fn into_config(self) -> RunConfig {
        RunConfig {
            mode: self.mode,
            epsilon: self.epsilon,
            mdt: self.mdt,
            beta: self.beta,
            pi: self.pi,
            price: self.price,
            time_limit: self.time_limit,
            gap: self.gap,
            ..RunConfig::default()
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp_millis().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1: usage, 2: data or model, 3: solver.
fn exit_code(e: &anyhow::Error) -> u8 {
    use windcf::error::Error as E;
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::InvalidConfig(_) => 1,
                E::Solver(_) | E::InvalidProblem(_) | E::TooLarge { .. } => 3,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let json = cli.json;
    match cli.command {
        Command::Generate(a) => cmd_generate(a, &base, json),
        Command::Train(a) => cmd_train(a, &base),
        Command::Explain(a) => cmd_explain(a, &base, json),
        Command::Simulate(a) => cmd_simulate(a, &base, json),
        Command::Report(a) => cmd_report(a, json),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_generate(a: GenerateArgs, base: &RunConfig, json: bool) -> Result<()> {
    let flags = RunConfig { out: a.out, seed: a.seed, ..RunConfig::default() }.or(base);
    let out = flags.require(&flags.out, "--out")?;
    let mut spec = match &a.spec {
        Some(p) => GeneratorSpec::load(p).with_context(|| format!("reading spec {}", p.display()))?,
        None => GeneratorSpec::default(),
    };
    if let Some(s) = flags.seed {
        spec.seed = s;
    }
    if let Some(y) = a.years {
        spec.years = y;
    }
    let (data, truth) = generate(&spec)?;
    save_csv(out, &data).with_context(|| format!("writing {}", out.display()))?;
    let truth_file = truth_path(out);
    truth.save(&truth_file)?;
    let anomalies = data.iter().filter(|x| x.is_anomalous()).count();
    log::info!("wrote {} samples to {}", data.len(), out.display());
    if json {
        print_json(&serde_json::json!({
            "rows": data.len(),
            "anomalies": anomalies,
            "data": out,
            "truth": truth_file,
        }))
    } else {
        println!("{} samples ({anomalies} anomalous) -> {}", data.len(), out.display());
        Ok(())
    }
}

/// The training summary always goes to stdout as JSON.
fn cmd_train(a: TrainArgs, base: &RunConfig) -> Result<()> {
    let flags = RunConfig {
        data: a.data,
        out: a.out,
        q: a.q,
        ratio: a.ratio,
        k: a.k,
        seed: a.seed,
        train_stats: a.train_stats.then_some(true),
        ..RunConfig::default()
    }
    .or(base);
    let data_path = flags.require(&flags.data, "--data")?;
    let out = flags.require(&flags.out, "--out")?;
    let data = load_csv(data_path).with_context(|| format!("reading {}", data_path.display()))?;
    let curve = match &base.model {
        // Only the power curve is taken from an existing bundle.
        Some(p) if p.exists() => ModelBundle::load(p)?.assets.power_curve,
        _ => Default::default(),
    };
    let (bundle, summary) = train_all(&data, &curve, &flags.train())?;
    bundle.save(out).with_context(|| format!("writing {}", out.display()))?;
    log::info!("model bundle written to {}", out.display());
    print_json(&summary)
}

fn load_bundle(flags: &RunConfig, n: Option<&Path>, t: Option<&Path>) -> Result<ModelBundle> {
    let path = flags.require(&flags.model, "--model")?;
    let mut bundle = ModelBundle::load(path).with_context(|| format!("reading model {}", path.display()))?;
    if let Some(p) = n {
        bundle.n = load_regressor(p).with_context(|| format!("reading {}", p.display()))?;
    }
    if let Some(p) = t {
        bundle.t = load_regressor(p).with_context(|| format!("reading {}", p.display()))?;
    }
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Serialize)]
struct Explanation<'a> {
    instance: &'a FeatureVector,
    class: u8,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<&'static str>,
    result: CounterfactualResult,
}

const ALREADY_GOOD: &str = "instance already classified good";

fn cmd_explain(a: ExplainArgs, base: &RunConfig, json: bool) -> Result<()> {
    let flags = RunConfig { model: a.model, data: a.data.clone(), ..a.solve.into_config() }.or(base);
    let bundle = load_bundle(&flags, a.n.as_deref(), a.t.as_deref())?;
    let x = match (&a.instance, &a.at) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let x: FeatureVector = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            x.validate()?;
            x
        }
        (None, Some(at)) => {
            let path = flags.require(&flags.data, "--data")?;
            let ts = parse_timestamp(at).map_err(|e| UsageError(e.to_string()))?;
            load_csv(path)?
                .into_iter()
                .find(|x| x.timestamp == ts)
                .ok_or_else(|| windcf::error::Error::InvalidData(format!("no sample at {at} in {}", path.display())))?
        }
        (None, None) => return Err(UsageError("need --instance, or --data with --at".into()).into()),
    };
    let models = bundle.models();
    let assets = &bundle.assets;
    let cfg = flags.counterfactual();
    cfg.validate()?;
    let mode = flags.mode();
    let score = models.classifier.score_sample(&x, &assets.power_curve)?;
    let class = models.classifier.classify_sample(&x, &assets.power_curve)?;

    if let Some(path) = &a.dump_lp {
        let built = match mode {
            Mode::Manufacturer => build_manufacturer_problem(&x, &models, assets, &cfg)?,
            _ => build_operator_problem(&x, &models, assets, &cfg)?,
        };
        std::fs::write(path, built.problem.to_lp_string()).with_context(|| format!("writing {}", path.display()))?;
    }

    let (message, result) = if class == 0 {
        (Some(ALREADY_GOOD), identity(mode, &x, score))
    } else {
        (None, solve_mode(mode, &x, &models, assets, &cfg)?)
    };
    let out = Explanation { instance: &x, class, score, message, result };
    if json {
        return print_json(&out);
    }
    if let Some(m) = out.message {
        println!("{m}");
    }
    let r = &out.result;
    println!("mode {mode}, status {:?}, score {:.6} (threshold {})", r.status, score, models.classifier.threshold);
    match &r.counterfactual {
        Some(cf) => {
            for f in [FeatureId::P, FeatureId::TN, FeatureId::TT] {
                println!("  {:<3} {:>10} -> {}", f.name(), x.get(f).unwrap_or(0.0), cf.get(f).unwrap_or(0.0));
            }
            if let (Some(obj), Some(s)) = (r.objective, r.score) {
                println!("objective {obj:.6}, new score {s:.6}, gap {:.2e}, {} nodes", r.gap, r.nodes);
            }
        }
        None => println!("no counterfactual; fallback is to stop production"),
    }
    Ok(())
}

/// The sample itself as a distance-zero counterfactual.
fn identity(mode: Mode, x: &FeatureVector, score: f64) -> CounterfactualResult {
    let mut cf = x.clone();
    cf.label = None;
    CounterfactualResult {
        mode,
        status: SolveStatus::Optimal,
        counterfactual: Some(cf),
        objective: Some(0.0),
        deltas: [FeatureId::P, FeatureId::TN, FeatureId::TT].into_iter().map(|f| (f, 0.0)).collect(),
        score: Some(score),
        gap: 0.0,
        nodes: 0,
        solve_time: 0.0,
        numerical_issues: false,
        stage1: None,
    }
}

/// Parses `--to`; a bare date means the end of that day.
fn parse_end(s: &str) -> Result<NaiveDateTime> {
    let t = parse_timestamp(s).map_err(|e| UsageError(e.to_string()))?;
    if chrono::NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").is_ok() {
        Ok(t + chrono::Duration::days(1))
    } else {
        Ok(t)
    }
}

fn cmd_simulate(a: SimulateArgs, base: &RunConfig, json: bool) -> Result<()> {
    let flags = RunConfig { data: a.data, model: a.model, out: a.out, jobs: a.jobs, ..a.solve.into_config() }.or(base);
    let data_path = flags.require(&flags.data, "--data")?;
    let out = flags.require(&flags.out, "--out")?;
    let from = parse_timestamp(&a.from).map_err(|e| UsageError(e.to_string()))?;
    let to = parse_end(&a.to)?;
    let bundle = load_bundle(&flags, None, None)?;
    let data = load_csv(data_path).with_context(|| format!("reading {}", data_path.display()))?;
    let cfg =
        ReplayConfig { mode: flags.mode(), counterfactual: flags.counterfactual(), jobs: flags.jobs.unwrap_or(0) };
    let t0 = std::time::Instant::now();
    let report = replay(&data, from, to, &bundle.models(), &bundle.assets, &cfg)?;
    let summary = report.write(out).with_context(|| format!("writing {}", out.display()))?;
    log::info!("replayed {} samples in {:.1}s", summary.replayed, t0.elapsed().as_secs_f64());
    if let Some(d) = report.mean_abs_delta(FeatureId::TT) {
        log::info!("mean |delta TT| over counterfactuals: {d:.3}");
    }
    if json {
        print_json(&summary)
    } else {
        print_summary(&summary);
        Ok(())
    }
}

fn print_summary(s: &Summary) {
    let c = &s.counts;
    println!("{} .. {} ({} mode)", s.meta.from, s.meta.to, s.meta.mode);
    println!("replayed {} of {} slots ({} missing)", s.replayed, s.slots, s.missing);
    println!(
        "already good {}, optimized {} ({} at limit), infeasible {}, time-limited {}",
        c.already_good, c.optimized, s.at_limit, c.infeasible, c.time_limited
    );
    let r = &s.revenue_eur;
    println!("revenue at {} EUR/MWh:", s.meta.price);
    println!("  historical      {:>14.2}", r.historical);
    println!("  with shutdown   {:>14.2}", r.shutdown);
    println!("  counterfactual  {:>14.2}", r.counterfactual);
    if let Some(v) = r.revenue_driven {
        println!("  revenue-driven  {v:>14.2}");
    }
    println!("gain over shutdown {:.2} EUR", s.gain_eur);
}

/// Recomputes the summary from `timeline.csv` and compares it with the
/// stored `summary.json`.
fn cmd_report(a: ReportArgs, json: bool) -> Result<()> {
    let rows = load_timeline(a.dir.join(TIMELINE_FILE))?;
    let text = std::fs::read_to_string(a.dir.join(SUMMARY_FILE))?;
    let stored: Summary = serde_json::from_str(&text)?;
    let derived = Summary::from_rows(&stored.meta, &rows);
    if derived != stored {
        return Err(
            windcf::error::Error::InvalidData(format!("{} does not match {}", SUMMARY_FILE, TIMELINE_FILE)).into()
        );
    }
    if json {
        print_json(&derived)
    } else {
        print_summary(&derived);
        Ok(())
    }
}
