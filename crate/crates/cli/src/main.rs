use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cnpg_core::experiments::{self, ComparisonRow, ExperimentConfig, TraceMeta, VERSION};
use cnpg_core::io::write_atomic;
use cnpg_core::lp::{self, LpStatus};
use cnpg_core::policy::random_features;
use cnpg_core::solver::{self, KappaInputs, SolverConfig};
use cnpg_core::{Cmdp, CmdpSpec, FeatureMap};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cnpg", version, about = "Conservative NPG primal-dual solver for tabular constrained MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random CMDP (and optionally a feature map).
    Generate(GenerateArgs),
    /// Run the primal-dual solver once and write its trace.
    Solve(SolveArgs),
    /// Solve the occupancy-measure LP.
    Baseline(BaselineArgs),
    /// Paired runs over several kappa values on one instance.
    Compare(CompareArgs),
    /// Aggregate trace files across seeds.
    Aggregate(AggregateArgs),
    /// Theoretical conservative margin.
    KappaCalc(KappaArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    states: usize,
    #[arg(long, default_value_t = 5)]
    actions: usize,
    #[arg(long, default_value_t = 1)]
    constraints: usize,
    #[arg(long, default_value_t = 0.8)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
    /// Also write unit-norm random features of this dimension.
    #[arg(long, requires = "features_output")]
    feature_dim: Option<usize>,
    #[arg(long)]
    features_output: Option<PathBuf>,
    /// Seed of the feature map (defaults to seed + 1).
    #[arg(long)]
    feature_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Standard,
    Extended,
}

#[derive(Args, Default)]
struct SolverOverrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_sgd: Option<usize>,
    #[arg(long)]
    n_constraint: Option<usize>,
    #[arg(long)]
    eta1: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma_lambda: Option<f64>,
    #[arg(long)]
    warm_start: bool,
}

impl SolverOverrides {
    fn apply(&self, cfg: &mut SolverConfig) {
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.n_sgd {
            cfg.n_sgd = v;
        }
        if let Some(v) = self.n_constraint {
            cfg.n_constraint = v;
        }
        if let Some(v) = self.eta1 {
            cfg.eta1 = v;
        }
        if let Some(v) = self.eta2 {
            cfg.eta2 = v;
        }
        if self.alpha.is_some() {
            cfg.alpha = self.alpha;
        }
        if self.sigma_lambda.is_some() {
            cfg.sigma_lambda = self.sigma_lambda;
        }
        if self.warm_start {
            cfg.warm_start_omega = true;
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    cmdp: PathBuf,
    /// Feature map file; tabular features when omitted.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Solver settings in TOML.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: SolverOverrides,
    /// Trace CSV; a `.meta.json` sidecar is written next to it.
    #[arg(short, long)]
    output: PathBuf,
    /// Record real wall-clock times instead of zeros.
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    cmdp: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    /// Output JSON; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment settings in TOML.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Comma-separated kappa values.
    #[arg(long, value_delimiter = ',')]
    kappa: Option<Vec<f64>>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    wall_clock: bool,
    #[command(flatten)]
    overrides: SolverOverrides,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Summary CSV; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also write per-kappa verdicts as JSON.
    #[arg(long)]
    verdict: Option<PathBuf>,
}

#[derive(Args)]
struct KappaArgs {
    #[arg(long)]
    iterations: usize,
    #[arg(long)]
    eta2: f64,
    #[arg(long)]
    gamma: f64,
    #[arg(long, default_value_t = 1)]
    constraints: usize,
    #[arg(long)]
    sigma_lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    eps_bias: f64,
    #[arg(long, default_value_t = 0.0)]
    eps_kn: f64,
    /// Compare against this instance's Slater margin.
    #[arg(long)]
    cmdp: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<cnpg_core::Error> for Failure {
    fn from(e: cnpg_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn load_cmdp(path: &Path) -> CliResult<Cmdp> {
    let c = Cmdp::load(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    c.validated()
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    text
}

fn generate(args: GenerateArgs) -> CliResult<()> {
    let spec = CmdpSpec::new(args.states, args.actions, args.constraints, args.gamma);
    let c = cnpg_core::cmdp::random_cmdp(&spec, args.seed)?;
    c.save(&args.output)?;
    if let (Some(dim), Some(path)) = (args.feature_dim, args.features_output) {
        let seed = args.feature_seed.unwrap_or(args.seed.wrapping_add(1));
        random_features(args.states, args.actions, dim, seed)?.save(&path)?;
    }
    Ok(())
}

fn preset_solver(p: Preset) -> SolverConfig {
    match p {
        Preset::Standard => SolverConfig::standard(),
        Preset::Extended => SolverConfig::extended(),
    }
}

fn solve(args: SolveArgs) -> CliResult<()> {
    let c = load_cmdp(&args.cmdp)?;
    let f = match &args.features {
        Some(path) => FeatureMap::load(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?,
        None => FeatureMap::tabular(c.num_states, c.num_actions),
    };
    let mut cfg = match (&args.config, args.preset) {
        (Some(path), _) => read_toml(path)?,
        (None, Some(p)) => preset_solver(p),
        (None, None) => SolverConfig::standard(),
    };
    args.overrides.apply(&mut cfg);
    if let Some(k) = args.kappa {
        cfg.kappa = k;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.check(c.gamma)?;
    let trace = solver::run(&c, &f, &cfg)?;
    for w in &trace.warnings {
        eprintln!("warning: {w}");
    }
    trace.save_csv(&args.output, args.wall_clock)?;
    let meta = TraceMeta {
        version: VERSION.to_string(),
        master_seed: c.generator_seed.unwrap_or(0),
        run_index: 0,
        seed: cfg.seed,
        config: trace.config.clone(),
        sigma_lambda: trace.sigma_lambda,
        alpha: trace.alpha,
        slater_margin: trace.slater_margin,
        warnings: trace.warnings.clone(),
    };
    write_atomic(&args.output.with_extension("meta.json"), to_json(&meta).as_bytes())?;
    Ok(())
}

fn baseline(args: BaselineArgs) -> CliResult<()> {
    let c = load_cmdp(&args.cmdp)?;
    if args.kappa.is_nan() || args.kappa < 0.0 {
        return Err(Failure::Validation(format!("kappa = {} must be non-negative", args.kappa)));
    }
    let sol = lp::solve_occupancy_lp(&c, args.kappa)?;
    let text = to_json(&sol);
    match &args.output {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    match sol.status {
        LpStatus::Optimal => Ok(()),
        LpStatus::Infeasible => Err(Failure::Runtime(format!("LP is infeasible at kappa = {}", args.kappa))),
        LpStatus::Unbounded => Err(Failure::Runtime("LP is unbounded".into())),
    }
}

fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>14} {:>14} {:>14} {:>16} {:>12} {:>10}",
        "kappa", "final J_r", "final avg J_g", "zero viol.", "first nonneg", "LP(kappa)", "LP gap"
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{:>8} {:>14.4} {:>14.4} {:>14} {:>16} {:>12} {:>10}",
            r.kappa,
            r.final_window_jr_mean,
            r.final_window_jg_mean.iter().copied().fold(f64::INFINITY, f64::min),
            r.zero_violation,
            r.first_nonneg_iter.map_or("never".to_string(), |k| k.to_string()),
            opt(r.lp_objective),
            opt(r.lp_gap),
        );
    }
    out
}

fn compare(args: CompareArgs) -> CliResult<()> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(path), _) => read_toml(path)?,
        (None, Some(Preset::Extended)) => ExperimentConfig::extended(),
        _ => ExperimentConfig::standard(),
    };
    args.overrides.apply(&mut cfg.solver);
    if let Some(v) = args.master_seed {
        cfg.master_seed = v;
    }
    if let Some(v) = args.runs {
        cfg.num_runs = v;
    }
    if let Some(v) = args.kappa {
        cfg.kappa_values = v;
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }
    if args.wall_clock {
        cfg.wall_clock = true;
    }
    if args.output_dir.is_some() {
        cfg.output_dir = args.output_dir;
    }
    cfg.check()?;
    let outcome = experiments::run_experiment(&cfg)?;
    for r in outcome.failures() {
        eprintln!(
            "run kappa={} index={} failed: {}",
            r.kappa,
            r.run_index,
            r.outcome.as_ref().err().map_or("", String::as_str)
        );
    }
    if let Some((_, t)) = outcome.runs.iter().find_map(|r| r.outcome.as_ref().ok().map(|t| (r, t))) {
        for w in &t.warnings {
            eprintln!("warning: {w}");
        }
    }
    print!("{}", comparison_table(&outcome.comparison));
    if outcome.failures().next().is_some() {
        return Err(Failure::Runtime("some runs failed".into()));
    }
    Ok(())
}

fn aggregate(args: AggregateArgs) -> CliResult<()> {
    let summary = experiments::aggregate_runs(&args.traces)?;
    let text = summary.to_csv_string()?;
    match &args.output {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    if let Some(path) = &args.verdict {
        let verdicts: Vec<_> = summary
            .kappas
            .iter()
            .map(|k| {
                serde_json::json!({
                    "kappa": k.kappa,
                    "num_traces": k.num_traces,
                    "final_window_jg_mean": k.final_window_jg_mean,
                    "zero_violation": k.zero_violation,
                    "first_nonneg_iter": experiments::first_nonneg_iter(&k.running_j_g_mean),
                })
            })
            .collect();
        write_atomic(path, to_json(&verdicts).as_bytes())?;
    }
    Ok(())
}

fn kappa_calc(args: KappaArgs) -> CliResult<()> {
    let value = solver::kappa_from_theory(&KappaInputs {
        iterations: args.iterations,
        eta2: args.eta2,
        gamma: args.gamma,
        num_constraints: args.constraints,
        sigma_lambda: args.sigma_lambda,
        eps_bias: args.eps_bias,
        eps_kn: args.eps_kn,
    })?;
    if value.clipped {
        eprintln!(
            "warning: formula value {} exceeds 1/(1-gamma); clipped to {}",
            value.raw, value.kappa
        );
    }
    let mut out = serde_json::to_value(value).expect("serializable value");
    if let Some(path) = &args.cmdp {
        let c = load_cmdp(path)?;
        let margin = lp::slater_margin(&c)?;
        out["slater_margin"] = serde_json::json!(margin);
        out["below_slater_margin"] = serde_json::json!(value.kappa < margin);
    }
    print!("{}", to_json(&out));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report("validation", &e.render().to_string());
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Solve(a) => solve(a),
        Command::Baseline(a) => baseline(a),
        Command::Compare(a) => compare(a),
        Command::Aggregate(a) => aggregate(a),
        Command::KappaCalc(a) => kappa_calc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            report("validation", &msg);
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            report("runtime", &msg);
            ExitCode::from(2)
        }
    }
}

fn report(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": kind, "message": message.trim_end() });
    eprintln!("{body}");
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opt<T: std::fmt::Debug + Clone + 'static>(s: impl Strategy<Value = T> + 'static) -> BoxedStrategy<Option<T>> {
        proptest::option::of(s).boxed()
    }

    proptest! {
        #[test]
        fn flags_win_over_config(
            iterations in opt(1usize..10_000),
            n_sgd in opt(1usize..1000),
            n_constraint in opt(1usize..1000),
            eta1 in opt(0.001f64..1.0),
            eta2 in opt(0.001f64..1.0),
            alpha in opt(0.001f64..1.0),
            sigma_lambda in opt(0.1f64..50.0),
            warm_start in any::<bool>(),
            base_warm in any::<bool>(),
        ) {
            let base = SolverConfig { warm_start_omega: base_warm, alpha: Some(0.5), ..SolverConfig::standard() };
            let o = SolverOverrides { iterations, n_sgd, n_constraint, eta1, eta2, alpha, sigma_lambda, warm_start };
            let mut cfg = base.clone();
            o.apply(&mut cfg);
            prop_assert_eq!(cfg.iterations, iterations.unwrap_or(base.iterations));
            prop_assert_eq!(cfg.n_sgd, n_sgd.unwrap_or(base.n_sgd));
            prop_assert_eq!(cfg.n_constraint, n_constraint.unwrap_or(base.n_constraint));
            prop_assert_eq!(cfg.eta1, eta1.unwrap_or(base.eta1));
            prop_assert_eq!(cfg.eta2, eta2.unwrap_or(base.eta2));
            prop_assert_eq!(cfg.alpha, alpha.or(base.alpha));
            prop_assert_eq!(cfg.sigma_lambda, sigma_lambda.or(base.sigma_lambda));
            prop_assert_eq!(cfg.warm_start_omega, warm_start || base_warm);
            prop_assert_eq!(cfg.kappa, base.kappa);
            prop_assert_eq!(cfg.seed, base.seed);
        }
    }
}
