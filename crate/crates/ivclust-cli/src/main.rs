//! Command-line surface for the `ivclust` library.
//!
//! Four subcommands: `test` evaluates one hypothesized coefficient vector,
//! `ci` inverts a scalar test into a confidence set, `diagnose` reports
//! first-stage strength, and `simulate` runs the Monte Carlo size and power
//! experiments.
//!
//! Machine-readable output (JSON, or CSV for simulation tables) goes to
//! standard output or the `--out` file; a one-line human summary always goes
//! to standard error. Exit codes: 0 on success regardless of the test
//! decision, 1 for usage or configuration errors, 2 for data or validation
//! errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use serde_json::{json, Value};

use ivclust::{
    clj_score_test, clj_test, clmi_test, cluster_ar_test, first_stage_f, invert_confidence_set,
    load_csv, partial_out_controls, power_experiment, size_experiment, validate, ClusteredDesign,
    ConfidenceSet,
    CsvSchema, Error as LibError, FFlavor, GridSpec, InversionOptions, KernelChoice, McConfig,
    McMethod, Method, TestOutcome, VarianceEstimator,
};

/// Version tag carried by every JSON payload, bumped on schema changes.
const SCHEMA_VERSION: u64 = 1;

#[derive(Parser)]
#[command(
    name = "ivclust",
    version,
    about = "Cluster-robust weak- and many-instrument IV inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test a hypothesized coefficient on the endogenous regressors.
    Test(TestArgs),
    /// Invert a test over a grid into a confidence set (one regressor).
    Ci(CiArgs),
    /// Report first-stage strength diagnostics and design validation.
    Diagnose(DiagnoseArgs),
    /// Run Monte Carlo experiments on simulated clustered data.
    #[command(subcommand)]
    Simulate(SimulateCommand),
}

/// Flags naming the data file and its columns, shared by the data-driven
/// subcommands. All are optional at parse time so that a `--config` file can
/// supply them; presence is enforced after merging.
#[derive(Args, Clone)]
struct DataArgs {
    /// CSV data file with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Outcome column.
    #[arg(long)]
    y: Option<String>,
    /// Endogenous regressor column(s), comma separated.
    #[arg(long)]
    x: Option<String>,
    /// Instrument column(s), comma separated.
    #[arg(long)]
    z: Option<String>,
    /// Cluster label column.
    #[arg(long)]
    cluster: Option<String>,
    /// Exogenous control column(s), comma separated.
    #[arg(long)]
    controls: Option<String>,
}

/// Method selection shared by `test` and `ci`.
#[derive(Args, Clone)]
struct MethodArgs {
    /// Test: cluster-ar, clj-ar, clj-score, or clmi-ar.
    #[arg(long)]
    method: Option<String>,
    /// Weighting kernel for the jackknife tests: plain, symmetric, or
    /// many-controls.
    #[arg(long)]
    kernel: Option<String>,
    /// Variance estimator for the jackknife tests: plain or cross-fit.
    #[arg(long)]
    estimator: Option<String>,
    /// Nominal test level.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    method: MethodArgs,
    /// Hypothesized coefficient(s), comma separated, one per endogenous
    /// regressor.
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<String>,
    /// JSON config file; explicit flags win over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    method: MethodArgs,
    /// Candidate grid as lo:hi:step.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    /// Skip bisection refinement of interval endpoints.
    #[arg(long)]
    no_refine: bool,
    /// Write per-grid-point decisions as CSV to this path.
    #[arg(long)]
    dump_grid: Option<PathBuf>,
    /// JSON config file; explicit flags win over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON config file; explicit flags win over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// Rejection rates under the null across instrument counts.
    Size(SimulateArgs),
    /// Rejection rates across hypothesized coefficients.
    Power(SimulateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Observations.
    #[arg(long)]
    n: Option<usize>,
    /// Clusters.
    #[arg(long)]
    g: Option<usize>,
    /// Cluster size imbalance; 0 gives balanced clusters.
    #[arg(long)]
    gamma: Option<f64>,
    /// Within-cluster dependence weight, in [0, 1).
    #[arg(long)]
    zeta: Option<f64>,
    /// Endogeneity, in [0, 1].
    #[arg(long)]
    rho: Option<f64>,
    /// Conditional heteroskedasticity exponent.
    #[arg(long = "het", alias = "h-exp")]
    h: Option<f64>,
    /// Instrument relevance.
    #[arg(long)]
    r: Option<f64>,
    /// Instrument counts for `size` (comma separated); a single count for
    /// `power`.
    #[arg(long)]
    k: Option<String>,
    /// True coefficient the data are generated at.
    #[arg(long, allow_hyphen_values = true)]
    beta0: Option<f64>,
    /// Hypothesized coefficient grid for `power`, as lo:hi:step.
    #[arg(long, allow_hyphen_values = true)]
    beta_grid: Option<String>,
    /// Methods to run, comma separated: clj-ar, clj-score, clmi-ar,
    /// cluster-ar, naive-jackknife-ar.
    #[arg(long)]
    methods: Option<String>,
    /// Monte Carlo replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed for the replication streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Nominal test level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Worker threads for the replication pool (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output format: csv or json.
    #[arg(long)]
    format: Option<String>,
    /// JSON config file; explicit flags win over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A command failure carrying the process exit code: 1 for usage and
/// configuration problems, 2 for data and validation problems.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<LibError> for Failure {
    fn from(e: LibError) -> Self {
        let code = match e {
            // Bad user-supplied parameters rather than bad data.
            LibError::InvalidConfig(_) | LibError::InfeasibleSizes { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Test(args) => cmd_test(args),
        Command::Ci(args) => cmd_ci(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Simulate(SimulateCommand::Size(args)) => cmd_simulate(args, true),
        Command::Simulate(SimulateCommand::Power(args)) => cmd_simulate(args, false),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

// ---------------------------------------------------------------------------
// Config-file merging
// ---------------------------------------------------------------------------

/// Parsed `--config` JSON object; every lookup is a fallback used only when
/// the corresponding flag is absent.
struct ConfigFile {
    root: Value,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let root = match path {
            None => Value::Null,
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| Failure::usage(format!("config {}: {e}", p.display())))?;
                if !v.is_object() {
                    return Err(Failure::usage(format!(
                        "config {} must contain a JSON object",
                        p.display()
                    )));
                }
                v
            }
        };
        Ok(ConfigFile { root })
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.root.get(key)
    }

    fn string(&self, key: &str) -> Result<Option<String>, Failure> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            // Column lists may be given as JSON arrays of strings.
            Some(Value::Array(items)) => {
                let mut parts = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        Value::String(s) => parts.push(s.clone()),
                        other => {
                            return Err(Failure::usage(format!(
                                "config key '{key}': expected strings, got {other}"
                            )))
                        }
                    }
                }
                Ok(Some(parts.join(",")))
            }
            Some(Value::Number(n)) => Ok(Some(n.to_string())),
            Some(other) => Err(Failure::usage(format!(
                "config key '{key}': expected a string, got {other}"
            ))),
        }
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, Failure> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Number(n)) => n.as_f64().map(Some).ok_or_else(|| {
                Failure::usage(format!("config key '{key}': not representable as f64"))
            }),
            Some(other) => Err(Failure::usage(format!(
                "config key '{key}': expected a number, got {other}"
            ))),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, Failure> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Number(n)) => n
                .as_u64()
                .map(|v| v as usize)
                .map(Some)
                .ok_or_else(|| Failure::usage(format!("config key '{key}': expected a non-negative integer"))),
            Some(other) => Err(Failure::usage(format!(
                "config key '{key}': expected an integer, got {other}"
            ))),
        }
    }

    fn u64(&self, key: &str) -> Result<Option<u64>, Failure> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Number(n)) => n.as_u64().map(Some).ok_or_else(|| {
                Failure::usage(format!("config key '{key}': expected a non-negative integer"))
            }),
            Some(other) => Err(Failure::usage(format!(
                "config key '{key}': expected an integer, got {other}"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Flag parsing helpers
// ---------------------------------------------------------------------------

fn split_columns(spec: &str) -> Vec<String> {
    spec.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_f64_list(spec: &str, what: &str) -> Result<Vec<f64>, Failure> {
    spec.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Failure::usage(format!("{what}: '{s}' is not a number")))
        })
        .collect()
}

fn parse_usize_list(spec: &str, what: &str) -> Result<Vec<usize>, Failure> {
    spec.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Failure::usage(format!("{what}: '{s}' is not a positive integer")))
        })
        .collect()
}

/// Parse `lo:hi:step` into a grid specification.
fn parse_grid(spec: &str) -> Result<GridSpec, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Failure::usage(format!(
            "grid '{spec}' must have the form lo:hi:step"
        )));
    }
    let mut vals = [0.0f64; 3];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|_| Failure::usage(format!("grid '{spec}': '{part}' is not a number")))?;
    }
    Ok(GridSpec {
        lo: vals[0],
        hi: vals[1],
        step: vals[2],
    })
}

/// Expand a grid specification into explicit points, inclusive of both ends
/// up to a small tolerance against accumulated rounding.
fn expand_grid(grid: &GridSpec) -> Result<Vec<f64>, Failure> {
    // Negated comparisons so NaN parameters fail rather than pass.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(grid.step > 0.0) || !(grid.lo <= grid.hi) {
        return Err(Failure::usage(format!(
            "grid {}:{}:{} must have lo <= hi and step > 0",
            grid.lo, grid.hi, grid.step
        )));
    }
    let count = ((grid.hi - grid.lo) / grid.step + 1.0 + 1e-9).floor() as usize;
    Ok((0..count).map(|i| grid.lo + i as f64 * grid.step).collect())
}

fn parse_kernel(name: &str) -> Result<KernelChoice, Failure> {
    match name {
        "plain" => Ok(KernelChoice::PlainClusterJackknife),
        "symmetric" => Ok(KernelChoice::SymmetricClusterJackknife),
        "many-controls" => Ok(KernelChoice::ManyControls),
        other => Err(Failure::usage(format!(
            "unknown kernel '{other}' (expected plain, symmetric, or many-controls)"
        ))),
    }
}

fn parse_estimator(name: &str) -> Result<VarianceEstimator, Failure> {
    match name {
        "plain" => Ok(VarianceEstimator::Plain),
        "cross-fit" => Ok(VarianceEstimator::CrossFit),
        other => Err(Failure::usage(format!(
            "unknown estimator '{other}' (expected plain or cross-fit)"
        ))),
    }
}

fn parse_method(
    name: &str,
    kernel: KernelChoice,
    estimator: VarianceEstimator,
) -> Result<Method, Failure> {
    match name {
        "cluster-ar" => Ok(Method::ClusterAr),
        "clj-ar" => Ok(Method::CljAr { kernel, estimator }),
        "clj-score" => Ok(Method::CljScore { kernel, estimator }),
        "clmi-ar" => Ok(Method::ClmiAr),
        other => Err(Failure::usage(format!(
            "unknown method '{other}' (expected cluster-ar, clj-ar, clj-score, or clmi-ar)"
        ))),
    }
}

fn kernel_tag(kernel: KernelChoice) -> &'static str {
    match kernel {
        KernelChoice::PlainClusterJackknife => "plain",
        KernelChoice::SymmetricClusterJackknife => "symmetric",
        KernelChoice::ManyControls => "many-controls",
    }
}

fn estimator_tag(estimator: VarianceEstimator) -> &'static str {
    match estimator {
        VarianceEstimator::Plain => "plain",
        VarianceEstimator::CrossFit => "cross-fit",
    }
}

fn method_tags(method: &Method) -> (&'static str, Option<&'static str>, Option<&'static str>) {
    match method {
        Method::ClusterAr => ("cluster-ar", None, None),
        Method::CljAr { kernel, estimator } => {
            ("clj-ar", Some(kernel_tag(*kernel)), Some(estimator_tag(*estimator)))
        }
        Method::CljScore { kernel, estimator } => {
            ("clj-score", Some(kernel_tag(*kernel)), Some(estimator_tag(*estimator)))
        }
        Method::ClmiAr => ("clmi-ar", None, None),
    }
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

/// Merge the data flags with the config file and load the design.
fn load_design(args: &DataArgs, config: &ConfigFile) -> Result<ClusteredDesign, Failure> {
    let require = |flag: &Option<String>, key: &str| -> Result<String, Failure> {
        match flag {
            Some(v) => Ok(v.clone()),
            None => config.string(key)?.ok_or_else(|| {
                Failure::usage(format!("missing --{key} (and no '{key}' in the config file)"))
            }),
        }
    };
    let data_path = match &args.data {
        Some(p) => p.clone(),
        None => PathBuf::from(require(&None, "data")?),
    };
    let controls = match &args.controls {
        Some(v) => split_columns(v),
        None => config
            .string("controls")?
            .map(|v| split_columns(&v))
            .unwrap_or_default(),
    };
    let schema = CsvSchema {
        outcome: require(&args.y, "y")?,
        endogenous: split_columns(&require(&args.x, "x")?),
        instruments: split_columns(&require(&args.z, "z")?),
        controls,
        cluster: require(&args.cluster, "cluster")?,
    };
    if schema.endogenous.is_empty() {
        return Err(Failure::usage("--x names no columns"));
    }
    if schema.instruments.is_empty() {
        return Err(Failure::usage("--z names no columns"));
    }
    load_csv(&data_path, &schema).map_err(Failure::from)
}

/// Resolve the method selection against the config file and defaults.
fn resolve_method(args: &MethodArgs, config: &ConfigFile) -> Result<(Method, f64), Failure> {
    let kernel_name = args
        .method_fallback(&args.kernel, config.string("kernel")?)
        .unwrap_or_else(|| "plain".to_string());
    let estimator_name = args
        .method_fallback(&args.estimator, config.string("estimator")?)
        .unwrap_or_else(|| "plain".to_string());
    let method_name = args
        .method_fallback(&args.method, config.string("method")?)
        .unwrap_or_else(|| "clj-ar".to_string());
    let kernel = parse_kernel(&kernel_name)?;
    let estimator = parse_estimator(&estimator_name)?;
    let method = parse_method(&method_name, kernel, estimator)?;
    let alpha = match args.alpha {
        Some(a) => a,
        None => config.f64("alpha")?.unwrap_or(0.05),
    };
    Ok((method, alpha))
}

impl MethodArgs {
    fn method_fallback(&self, flag: &Option<String>, cfg: Option<String>) -> Option<String> {
        flag.clone().or(cfg)
    }
}

/// Controls enter the many-controls kernel raw; every other method expects
/// them residualized out of `y`, `X`, and `Z` up front.
fn prepare_design(design: ClusteredDesign, method: &Method) -> Result<ClusteredDesign, Failure> {
    let keeps_controls = matches!(
        method,
        Method::CljAr {
            kernel: KernelChoice::ManyControls,
            ..
        } | Method::CljScore {
            kernel: KernelChoice::ManyControls,
            ..
        }
    );
    if keeps_controls || design.w().is_none() {
        return Ok(design);
    }
    Ok(partial_out_controls(&design)?)
}

// ---------------------------------------------------------------------------
// Output plumbing
// ---------------------------------------------------------------------------

/// Write machine output to `--out` or standard output.
fn emit(out: Option<&Path>, payload: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, payload)
            .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display()))),
        None => {
            // Exactly one trailing newline, whether or not the payload
            // already carries one.
            println!("{}", payload.trim_end_matches('\n'));
            Ok(())
        }
    }
}

fn outcome_json(outcome: &TestOutcome, alpha: f64, design: &ClusteredDesign) -> Value {
    let (method, kernel, estimator) = method_tags(&outcome.method);
    json!({
        "schema_version": SCHEMA_VERSION,
        "command": "test",
        "method": method,
        "kernel": kernel,
        "estimator": estimator,
        "alpha": alpha,
        "beta": outcome.beta.to_vec(),
        "statistic": float_json(outcome.statistic),
        "threshold": float_json(outcome.threshold),
        "p_value": float_json(outcome.p_value),
        "p_value_normal": outcome.p_value_normal.map(float_json),
        "reject": outcome.reject,
        "n": design.n(),
        "g": design.g(),
        "k": design.k(),
        "p": design.p(),
    })
}

/// JSON has no NaN/infinity literals; map them to null so the payload stays
/// parseable.
fn float_json(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn interval_text(set: &ConfidenceSet) -> String {
    if set.intervals.is_empty() {
        return "empty".to_string();
    }
    let mut text = String::new();
    for (i, (lo, hi)) in set.intervals.iter().enumerate() {
        if i > 0 {
            text.push_str(" U ");
        }
        let left = if set.unbounded_below && i == 0 {
            "(-inf".to_string()
        } else {
            format!("[{lo:.4}")
        };
        let right = if set.unbounded_above && i == set.intervals.len() - 1 {
            "inf)".to_string()
        } else {
            format!("{hi:.4}]")
        };
        let _ = write!(text, "{left}, {right}");
    }
    text
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_test(args: TestArgs) -> Result<(), Failure> {
    let config = ConfigFile::load(args.config.as_deref())?;
    let design = load_design(&args.data, &config)?;
    let (method, alpha) = resolve_method(&args.method, &config)?;
    let design = prepare_design(design, &method)?;
    let beta_spec = args
        .beta
        .clone()
        .or(config.string("beta")?)
        .unwrap_or_else(|| "0".to_string());
    let beta_vals = parse_f64_list(&beta_spec, "--beta")?;
    if beta_vals.len() != design.p() {
        return Err(Failure::usage(format!(
            "--beta names {} value(s) for {} endogenous regressor(s)",
            beta_vals.len(),
            design.p()
        )));
    }
    let beta = Array1::from_vec(beta_vals);

    let outcome = match method {
        Method::ClusterAr => cluster_ar_test(&design, &beta.view(), alpha)?,
        Method::CljAr { kernel, estimator } => {
            clj_test(&design, &beta.view(), alpha, kernel, estimator)?
        }
        Method::CljScore { kernel, estimator } => {
            clj_score_test(&design, &beta.view(), alpha, kernel, estimator)?
        }
        Method::ClmiAr => clmi_test(&design, &beta.view(), alpha)?,
    };

    let payload = outcome_json(&outcome, alpha, &design);
    emit(args.out.as_deref(), &payload.to_string())?;
    let (tag, _, _) = method_tags(&outcome.method);
    eprintln!(
        "{tag} at beta = {}: statistic {:.4} vs threshold {:.4}, p = {:.4} -> {} (alpha = {alpha})",
        beta_text(&outcome.beta),
        outcome.statistic,
        outcome.threshold,
        outcome.p_value,
        if outcome.reject { "rejected" } else { "not rejected" },
    );
    Ok(())
}

fn beta_text(beta: &Array1<f64>) -> String {
    let parts: Vec<String> = beta.iter().map(|b| format!("{b}")).collect();
    parts.join(",")
}

fn cmd_ci(args: CiArgs) -> Result<(), Failure> {
    let config = ConfigFile::load(args.config.as_deref())?;
    let design = load_design(&args.data, &config)?;
    let (method, alpha) = resolve_method(&args.method, &config)?;
    let design = prepare_design(design, &method)?;
    let grid = match args.grid.clone().or(config.string("grid")?) {
        Some(spec) => parse_grid(&spec)?,
        None => GridSpec::default(),
    };
    let options = InversionOptions {
        grid,
        refine: !args.no_refine,
    };
    let set = invert_confidence_set(&design, method, alpha, &options)?;

    if let Some(path) = &args.dump_grid {
        let mut csv = String::from("beta,reject\n");
        for (beta, reject) in &set.grid_decisions {
            let _ = writeln!(csv, "{beta},{}", u8::from(*reject));
        }
        std::fs::write(path, csv)
            .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
    }

    let (tag, kernel, estimator) = method_tags(&set.method);
    let payload = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "ci",
        "method": tag,
        "kernel": kernel,
        "estimator": estimator,
        "alpha": set.alpha,
        "intervals": set.intervals.iter().map(|(lo, hi)| json!([lo, hi])).collect::<Vec<_>>(),
        "unbounded_below": set.unbounded_below,
        "unbounded_above": set.unbounded_above,
        "refined": set.refined,
        "grid": { "lo": set.grid.lo, "hi": set.grid.hi, "step": set.grid.step },
        "grid_points": set.grid_decisions.len(),
        "warnings": set.warnings,
        "n": design.n(),
        "g": design.g(),
        "k": design.k(),
    });
    emit(args.out.as_deref(), &payload.to_string())?;
    eprintln!(
        "{tag} {:.0}% confidence set: {}",
        100.0 * (1.0 - set.alpha),
        interval_text(&set)
    );
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), Failure> {
    let config = ConfigFile::load(args.config.as_deref())?;
    let design = load_design(&args.data, &config)?;
    let report = validate(&design)?;
    let n_controls = design.w().map(|w| w.ncols()).unwrap_or(0);
    // First-stage strength is judged after the controls are swept out.
    let design = partial_out_controls(&design)?;

    let mut f_json = serde_json::Map::new();
    let mut human = String::new();
    for (flavor, name) in [
        (FFlavor::Homoskedastic, "homoskedastic"),
        (FFlavor::Robust, "robust"),
        (FFlavor::Effective, "effective"),
    ] {
        // The robust and effective flavors are defined for one endogenous
        // regressor; skip them rather than failing the whole report.
        match first_stage_f(&design, flavor) {
            Ok(f) => {
                f_json.insert(
                    name.to_string(),
                    json!({ "value": float_json(f.value), "infinite": f.infinite }),
                );
                let _ = write!(human, "{name}: {:.3} ", f.value);
            }
            Err(LibError::UnsupportedDimension(_)) => {
                f_json.insert(name.to_string(), Value::Null);
            }
            Err(e) => return Err(e.into()),
        }
    }

    let payload = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "diagnose",
        "n": design.n(),
        "g": design.g(),
        "k": design.k(),
        "p": design.p(),
        "l": n_controls,
        "first_stage_f": Value::Object(f_json),
        "validation": {
            "contiguous_clusters": report.contiguous,
            "z_full_rank": report.z_full_rank,
            "w_full_rank": report.w_full_rank,
            "k_lt_g": report.k_lt_g,
            "max_cluster_leverage": float_json(report.max_cluster_leverage),
            "nmax_over_g": report.nmax_over_g,
            "few_clusters": report.few_clusters,
        },
    });
    emit(args.out.as_deref(), &payload.to_string())?;
    eprintln!(
        "first-stage F: {human}| n={} G={} k={} p={}",
        design.n(),
        design.g(),
        design.k(),
        design.p()
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, size: bool) -> Result<(), Failure> {
    let config = ConfigFile::load(args.config.as_deref())?;
    let defaults = McConfig::default();
    let mut mc = McConfig {
        n: pick(args.n, config.usize("n")?, defaults.n),
        g: pick(args.g, config.usize("g")?, defaults.g),
        gamma: pick(args.gamma, config.f64("gamma")?, defaults.gamma),
        zeta: pick(args.zeta, config.f64("zeta")?, defaults.zeta),
        rho: pick(args.rho, config.f64("rho")?, defaults.rho),
        h: pick(args.h, config.f64("het")?, defaults.h),
        big_r: pick(args.r, config.f64("r")?, defaults.big_r),
        k: defaults.k,
        beta0: pick(args.beta0, config.f64("beta0")?, defaults.beta0),
        reps: pick(
            args.reps,
            config.usize("reps")?,
            if size { 2000 } else { 500 },
        ),
        base_seed: pick(args.seed, config.u64("seed")?, defaults.base_seed),
        alpha: pick(args.alpha, config.f64("alpha")?, defaults.alpha),
    };
    let threads = match args.threads {
        Some(t) => Some(t),
        None => config.usize("threads")?,
    };
    let format = args
        .format
        .clone()
        .or(config.string("format")?)
        .unwrap_or_else(|| "csv".to_string());
    if format != "csv" && format != "json" {
        return Err(Failure::usage(format!(
            "unknown format '{format}' (expected csv or json)"
        )));
    }

    let methods_spec = args.methods.clone().or(config.string("methods")?).unwrap_or_else(|| {
        if size {
            "clj-ar,clj-score,clmi-ar".to_string()
        } else {
            "clj-ar,clj-score".to_string()
        }
    });
    let methods: Vec<McMethod> = methods_spec
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<McMethod>().map_err(Failure::from))
        .collect::<Result<_, _>>()?;

    let k_spec = args.k.clone().or(config.string("k")?);
    let table = if size {
        let k_list = match k_spec {
            Some(spec) => parse_usize_list(&spec, "--k")?,
            None => vec![1, 30, 60],
        };
        size_experiment(&mc, &methods, &k_list, threads)?
    } else {
        mc.k = match k_spec {
            Some(spec) => {
                let parsed = parse_usize_list(&spec, "--k")?;
                if parsed.len() != 1 {
                    return Err(Failure::usage(
                        "power experiments take a single --k; vary --beta-grid instead",
                    ));
                }
                parsed[0]
            }
            None => 10,
        };
        let grid_spec = args
            .beta_grid
            .clone()
            .or(config.string("beta_grid")?)
            .unwrap_or_else(|| "-1:1:0.1".to_string());
        let grid = expand_grid(&parse_grid(&grid_spec)?)?;
        power_experiment(&mc, &methods, &grid, threads)?
    };

    let payload = if format == "csv" {
        table.to_csv()
    } else {
        let mut v = table.to_json();
        if let Value::Object(map) = &mut v {
            map.insert("schema_version".to_string(), json!(SCHEMA_VERSION));
            map.insert(
                "command".to_string(),
                json!(if size { "simulate-size" } else { "simulate-power" }),
            );
            map.insert(
                "config".to_string(),
                json!({
                    "n": mc.n, "g": mc.g, "gamma": mc.gamma, "zeta": mc.zeta,
                    "rho": mc.rho, "het": mc.h, "r": mc.big_r, "beta0": mc.beta0,
                    "reps": mc.reps, "seed": mc.base_seed, "alpha": mc.alpha,
                }),
            );
        }
        v.to_string()
    };
    emit(args.out.as_deref(), &payload)?;
    eprintln!(
        "{} experiment: {} method(s), {} reps, seed {}",
        if size { "size" } else { "power" },
        methods.len(),
        mc.reps,
        mc.base_seed
    );
    Ok(())
}

fn pick<T>(flag: Option<T>, cfg: Option<T>, default: T) -> T {
    flag.or(cfg).unwrap_or(default)
}
