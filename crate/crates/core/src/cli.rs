//! Command-line front end: run a test on a CSV file, or run simulation
//! studies, with reproducibility manifests.
//!
//! Flags are long-form kebab-case. A `key=value` config file can supply any
//! flag's value; explicit flags win. The seed falls back to the `FVTEST_SEED`
//! environment variable when neither flag nor config provides one.
//!
//! Exit codes: 0 success, 2 data or configuration error, 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::boot::{run_test, MultiplierConfig, MultiplierKind, PValueConvention, TestResult};
use crate::combine::{aggregate_test, stat_matrix, AggregateResult};
use crate::data::{load_csv, ColumnSchema, EstimandTag, Role};
use crate::funclass::{gamma_grid, ArgmaxInfo, FunctionClassSpec};
use crate::scores::{compute_scores, EstimandConfig};
use crate::sim::{
    monte_carlo, DgpSpec, Ex2Coefficients, Example, Method, MonteCarloConfig, PipelineSettings,
};
use crate::Error;

#[derive(Parser, Debug)]
#[command(name = "fvtest")]
#[command(about = "Constancy tests for conditional means, treatment effects, and covariances")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test a CSV dataset for constancy of the chosen estimand.
    Test(TestArgs),
    /// Run Monte Carlo size/power studies over the built-in examples.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Default)]
struct TestArgs {
    /// Input CSV file (UTF-8, header row).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Column roles, e.g. outcome=y,conditioning=x,treatment=t,covariate=w.
    #[arg(long)]
    schema: Option<String>,
    /// One of cond_mean, cate, cond_cov.
    #[arg(long)]
    estimand: Option<String>,
    /// One of indicator, rkhs, aggregate, cauchy.
    #[arg(long)]
    class: Option<String>,
    /// Basis dimension.
    #[arg(long = "D")]
    basis_dim: Option<usize>,
    /// Number of grid classes.
    #[arg(long = "K")]
    grid_size: Option<usize>,
    #[arg(long)]
    gamma_min: Option<f64>,
    #[arg(long)]
    gamma_max: Option<f64>,
    /// Blend weight for the single-class rkhs test (default 1.0).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Bootstrap replicates.
    #[arg(long = "B")]
    bootstrap: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// rademacher or normal.
    #[arg(long)]
    multiplier: Option<String>,
    /// Propensity: "known:<p>" or "logistic[:ridge]" (cate only).
    #[arg(long)]
    propensity: Option<String>,
    /// Worker threads for the bootstrap loop.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// key=value defaults, overridden by explicit flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct SimulateArgs {
    /// ex1, ex2, ex3, or all.
    #[arg(long)]
    example: Option<String>,
    /// Comma list of settings (default 1,2,3).
    #[arg(long)]
    settings: Option<String>,
    /// Comma list of sample sizes (overrides the profile grid).
    #[arg(long = "n")]
    sample_sizes: Option<String>,
    /// Monte Carlo replications per cell.
    #[arg(long)]
    reps: Option<usize>,
    /// desk (n in 125..500, B=300) or full (paper grid, B=800).
    #[arg(long)]
    profile: Option<String>,
    /// Comma list of methods (default all five).
    #[arg(long)]
    methods: Option<String>,
    #[arg(long = "D")]
    basis_dim: Option<usize>,
    #[arg(long = "K")]
    grid_size: Option<usize>,
    #[arg(long)]
    gamma_min: Option<f64>,
    #[arg(long)]
    gamma_max: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "B")]
    bootstrap: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    multiplier: Option<String>,
    /// Worker threads for replicate-level parallelism.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the task count and exit without running.
    #[arg(long, default_value_t = false)]
    dry_run: bool,
    /// Example 3 setting 3: draw Z from U(-1,1) instead of U(0,1).
    #[arg(long, default_value_t = false)]
    ex3_wide_z: bool,
    /// key=value defaults, overridden by explicit flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run the exact configuration stored in a previous manifest.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct RunFailure {
    pub code: i32,
    pub message: String,
}

impl RunFailure {
    fn usage(message: impl Into<String>) -> Self {
        RunFailure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for RunFailure {
    fn from(err: Error) -> Self {
        RunFailure {
            code: err.exit_code(),
            message: err.to_string(),
        }
    }
}

/// Entry point used by `main`; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints help/version itself with code 0.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Test(args) => cmd_test(&args),
        Command::Simulate(args) => cmd_simulate(&args),
    };
    match result {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            failure.code
        }
    }
}

fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, RunFailure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunFailure::usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            RunFailure::usage(format!("config line {} is not key=value", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

struct Resolver {
    config: BTreeMap<String, String>,
}

impl Resolver {
    fn new(path: Option<&PathBuf>) -> Result<Self, RunFailure> {
        let config = match path {
            Some(p) => read_config_file(p)?,
            None => BTreeMap::new(),
        };
        Ok(Resolver { config })
    }

    /// Flag value, else config-file value, else None.
    fn get<V: FromStr + Clone>(&self, flag: &Option<V>, key: &str) -> Result<Option<V>, RunFailure> {
        if let Some(v) = flag {
            return Ok(Some(v.clone()));
        }
        match self.config.get(key) {
            Some(raw) => raw
                .parse::<V>()
                .map(Some)
                .map_err(|_| RunFailure::usage(format!("config key '{key}': bad value '{raw}'"))),
            None => Ok(None),
        }
    }

    fn seed(&self, flag: &Option<u64>) -> Result<u64, RunFailure> {
        if let Some(seed) = self.get(flag, "seed")? {
            return Ok(seed);
        }
        match std::env::var("FVTEST_SEED") {
            Ok(raw) => raw
                .parse()
                .map_err(|_| RunFailure::usage(format!("FVTEST_SEED: bad value '{raw}'"))),
            Err(_) => Ok(0),
        }
    }
}

pub fn parse_schema(spec: &str) -> Result<ColumnSchema, String> {
    let mut columns = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (role_name, column) = part
            .split_once('=')
            .ok_or_else(|| format!("schema entry '{part}' is not role=column"))?;
        let role = Role::parse(role_name.trim())
            .ok_or_else(|| format!("unknown role '{role_name}'"))?;
        columns.push((column.trim().to_string(), role));
    }
    ColumnSchema::new(columns).map_err(|e| e.to_string())
}

fn parse_estimand(name: &str) -> Result<EstimandTag, RunFailure> {
    match name {
        "cond_mean" => Ok(EstimandTag::CondMean),
        "cate" => Ok(EstimandTag::Cate),
        "cond_cov" => Ok(EstimandTag::CondCov),
        other => Err(RunFailure::usage(format!("unknown estimand '{other}'"))),
    }
}

fn parse_multiplier(name: &str) -> Result<MultiplierKind, RunFailure> {
    match name {
        "rademacher" => Ok(MultiplierKind::Rademacher),
        "normal" | "standard_normal" => Ok(MultiplierKind::StandardNormal),
        other => Err(RunFailure::usage(format!("unknown multiplier '{other}'"))),
    }
}

fn parse_propensity(raw: &str) -> Result<crate::smooth::PropensityKind, RunFailure> {
    use crate::smooth::PropensityKind;
    if let Some(rest) = raw.strip_prefix("known:") {
        let p: f64 = rest
            .parse()
            .map_err(|_| RunFailure::usage(format!("bad propensity constant '{rest}'")))?;
        return Ok(PropensityKind::KnownConstant(p));
    }
    if raw == "logistic" {
        return Ok(PropensityKind::SplineLogistic(1.0));
    }
    if let Some(rest) = raw.strip_prefix("logistic:") {
        let ridge: f64 = rest
            .parse()
            .map_err(|_| RunFailure::usage(format!("bad logistic ridge '{rest}'")))?;
        return Ok(PropensityKind::SplineLogistic(ridge));
    }
    Err(RunFailure::usage(format!("unknown propensity '{raw}'")))
}

fn unix_timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Serialize)]
struct ClassReport {
    spec: FunctionClassSpec,
    statistic: f64,
    p_alg1: f64,
    p_plus_one: f64,
    argmax: ArgmaxInfo,
}

#[derive(Serialize)]
struct AggregateReport {
    q0: f64,
    p_aggregate: f64,
}

#[derive(Serialize)]
struct TestReport {
    command: &'static str,
    input: String,
    estimand: EstimandTag,
    class: String,
    n: usize,
    theta_hat: f64,
    seed: u64,
    multiplier: MultiplierKind,
    basis_dim: usize,
    grid_size: usize,
    gamma_min: f64,
    gamma_max: f64,
    eta: f64,
    bootstrap_replicates: usize,
    alpha: f64,
    headline_p: f64,
    reject_at_alpha: bool,
    classes: Vec<ClassReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregate: Option<AggregateReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_cauchy: Option<f64>,
    degenerate_scores: bool,
    generated_at_unix: u64,
}

fn class_report_from(result: &TestResult) -> ClassReport {
    ClassReport {
        spec: result.class_spec.clone(),
        statistic: result.statistic,
        p_alg1: result.p_alg1,
        p_plus_one: result.p_plus_one,
        argmax: result.argmax.clone(),
    }
}

fn cmd_test(args: &TestArgs) -> Result<(), RunFailure> {
    let resolver = Resolver::new(args.config.as_ref())?;
    let input: PathBuf = resolver
        .get(&args.input, "input")?
        .ok_or_else(|| RunFailure::usage("--input is required"))?;
    let schema_text: String = resolver
        .get(&args.schema, "schema")?
        .ok_or_else(|| RunFailure::usage("--schema is required"))?;
    let schema = parse_schema(&schema_text).map_err(RunFailure::usage)?;
    let estimand_name: String = resolver
        .get(&args.estimand, "estimand")?
        .unwrap_or_else(|| "cond_mean".into());
    let estimand = parse_estimand(&estimand_name)?;
    let class: String = resolver
        .get(&args.class, "class")?
        .unwrap_or_else(|| "aggregate".into());
    let basis_dim = resolver.get(&args.basis_dim, "D")?.unwrap_or(100);
    let grid_size = resolver.get(&args.grid_size, "K")?.unwrap_or(50);
    let gamma_min = resolver.get(&args.gamma_min, "gamma-min")?.unwrap_or(1e-5);
    let gamma_max = resolver.get(&args.gamma_max, "gamma-max")?.unwrap_or(1e-3);
    let gamma_single = resolver.get(&args.gamma, "gamma")?.unwrap_or(1.0);
    let eta = resolver.get(&args.eta, "eta")?.unwrap_or(1.0);
    let bootstrap = resolver.get(&args.bootstrap, "B")?.unwrap_or(800);
    let alpha = resolver.get(&args.alpha, "alpha")?.unwrap_or(0.05);
    let seed = resolver.seed(&args.seed)?;
    let multiplier_name: String = resolver
        .get(&args.multiplier, "multiplier")?
        .unwrap_or_else(|| "rademacher".into());
    let multiplier = parse_multiplier(&multiplier_name)?;
    let out_dir: PathBuf = resolver
        .get(&args.out_dir, "out-dir")?
        .unwrap_or_else(|| PathBuf::from("."));

    let dataset = load_csv(&input, &schema, estimand).map_err(Error::from)?;
    let mut est_cfg = EstimandConfig::new(estimand);
    if let Some(raw) = resolver.get(&args.propensity, "propensity")? {
        est_cfg.propensity = parse_propensity(&raw)?;
    }
    if let Some(workers) = resolver.get(&args.workers, "workers")? {
        // Best effort: the pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global();
    }
    let scores = compute_scores(&dataset, &est_cfg).map_err(Error::from)?;
    let config = MultiplierConfig::new(multiplier, bootstrap, seed);

    let mut classes = Vec::new();
    let mut aggregate: Option<AggregateReport> = None;
    let mut p_cauchy: Option<f64> = None;
    let degenerate;
    let headline_p;

    match class.as_str() {
        "indicator" => {
            let result =
                run_test(&scores, &FunctionClassSpec::Indicator, &config).map_err(Error::from)?;
            degenerate = result.degenerate_scores;
            headline_p = result.p_value(PValueConvention::PlusOne);
            classes.push(class_report_from(&result));
        }
        "rkhs" => {
            let spec =
                FunctionClassSpec::rkhs(basis_dim, gamma_single, eta).map_err(Error::from)?;
            let result = run_test(&scores, &spec, &config).map_err(Error::from)?;
            degenerate = result.degenerate_scores;
            headline_p = result.p_value(PValueConvention::PlusOne);
            classes.push(class_report_from(&result));
        }
        "aggregate" | "cauchy" => {
            let mut specs = vec![FunctionClassSpec::Indicator];
            for gamma in gamma_grid(grid_size, gamma_min, gamma_max).map_err(Error::from)? {
                specs.push(FunctionClassSpec::rkhs(basis_dim, gamma, eta).map_err(Error::from)?);
            }
            let matrix = stat_matrix(&scores, &specs, &config).map_err(Error::from)?;
            let agg: AggregateResult = aggregate_test(&matrix).map_err(Error::from)?;
            degenerate = scores.phi.iter().all(|&p| p == scores.phi[0]);
            for (idx, spec) in specs.iter().enumerate() {
                let observed = matrix.t[0][idx];
                let count = matrix.t[1..].iter().filter(|row| row[idx] > observed).count();
                classes.push(ClassReport {
                    spec: spec.clone(),
                    statistic: observed,
                    p_alg1: count as f64 / bootstrap as f64,
                    p_plus_one: (1 + count) as f64 / (bootstrap + 1) as f64,
                    argmax: matrix.argmax[idx].clone(),
                });
            }
            aggregate = Some(AggregateReport {
                q0: agg.q0,
                p_aggregate: agg.p_aggregate,
            });
            p_cauchy = Some(agg.p_cauchy);
            headline_p = if class == "aggregate" {
                agg.p_aggregate
            } else {
                agg.p_cauchy
            };
        }
        other => return Err(RunFailure::usage(format!("unknown class '{other}'"))),
    }

    let report = TestReport {
        command: "test",
        input: input.display().to_string(),
        estimand,
        class: class.clone(),
        n: dataset.n(),
        theta_hat: scores.theta_hat,
        seed,
        multiplier,
        basis_dim,
        grid_size,
        gamma_min,
        gamma_max,
        eta,
        bootstrap_replicates: bootstrap,
        alpha,
        headline_p,
        reject_at_alpha: headline_p <= alpha,
        classes,
        aggregate,
        p_cauchy,
        degenerate_scores: degenerate,
        generated_at_unix: unix_timestamp(),
    };

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| RunFailure::usage(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, json.as_bytes())
        .map_err(|e| RunFailure::usage(format!("cannot write {}: {e}", path.display())))?;
    println!(
        "n={} estimand={} class={} headline_p={:.6} reject(alpha={})={}",
        report.n, estimand_name, class, headline_p, alpha, report.reject_at_alpha
    );
    println!("report: {}", path.display());
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct SimManifest {
    command: String,
    config: MonteCarloConfig,
    crate_version: String,
    #[serde(default)]
    rows: Vec<crate::sim::RejectionRow>,
    #[serde(default)]
    cell_errors: Vec<crate::sim::CellFailure>,
    #[serde(default)]
    generated_at_unix: u64,
}

fn parse_list<V: FromStr>(raw: &str, what: &str) -> Result<Vec<V>, RunFailure> {
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<V>()
                .map_err(|_| RunFailure::usage(format!("bad {what} value '{s}'")))
        })
        .collect()
}

fn parse_method(name: &str) -> Result<Method, RunFailure> {
    match name {
        "indicator" => Ok(Method::Indicator),
        "fixed_rkhs" => Ok(Method::FixedRkhs),
        "combined_rkhs" => Ok(Method::CombinedRkhs),
        "aggregate" => Ok(Method::Aggregate),
        "cauchy" => Ok(Method::Cauchy),
        other => Err(RunFailure::usage(format!("unknown method '{other}'"))),
    }
}

fn build_simulate_config(args: &SimulateArgs) -> Result<MonteCarloConfig, RunFailure> {
    let resolver = Resolver::new(args.config.as_ref())?;
    let profile: String = resolver
        .get(&args.profile, "profile")?
        .unwrap_or_else(|| "desk".into());
    let (profile_ns, profile_b): (Vec<usize>, usize) = match profile.as_str() {
        "desk" => (vec![125, 250, 500], 300),
        "full" => (vec![125, 250, 500, 1000, 2000], 800),
        other => return Err(RunFailure::usage(format!("unknown profile '{other}'"))),
    };

    let example_name: String = resolver
        .get(&args.example, "example")?
        .unwrap_or_else(|| "all".into());
    let examples: Vec<Example> = match example_name.as_str() {
        "ex1" => vec![Example::Ex1],
        "ex2" => vec![Example::Ex2],
        "ex3" => vec![Example::Ex3],
        "all" => vec![Example::Ex1, Example::Ex2, Example::Ex3],
        other => return Err(RunFailure::usage(format!("unknown example '{other}'"))),
    };
    let settings: Vec<u8> = match resolver.get(&args.settings, "settings")? {
        Some(raw) => parse_list(&raw, "setting")?,
        None => vec![1, 2, 3],
    };
    let sample_sizes: Vec<usize> = match resolver.get(&args.sample_sizes, "n")? {
        Some(raw) => parse_list(&raw, "sample size")?,
        None => profile_ns,
    };
    let methods: Vec<Method> = match resolver.get(&args.methods, "methods")? {
        Some(raw) => raw
            .split(',')
            .map(|s| parse_method(s.trim()))
            .collect::<Result<_, _>>()?,
        None => vec![
            Method::Indicator,
            Method::FixedRkhs,
            Method::CombinedRkhs,
            Method::Aggregate,
            Method::Cauchy,
        ],
    };

    let ex3_wide_z = args.ex3_wide_z
        || resolver
            .config
            .get("ex3-wide-z")
            .is_some_and(|v| v == "true" || v == "1");
    let mut cells = Vec::new();
    for example in &examples {
        for &setting in &settings {
            for &n in &sample_sizes {
                cells.push(DgpSpec {
                    example: *example,
                    setting,
                    n,
                    coefficients: Ex2Coefficients::default(),
                    ex3_wide_z,
                });
            }
        }
    }

    let pipeline = PipelineSettings {
        basis_dim: resolver.get(&args.basis_dim, "D")?.unwrap_or(100),
        grid_size: resolver.get(&args.grid_size, "K")?.unwrap_or(50),
        gamma_min: resolver.get(&args.gamma_min, "gamma-min")?.unwrap_or(1e-5),
        gamma_max: resolver.get(&args.gamma_max, "gamma-max")?.unwrap_or(1e-3),
        eta: resolver.get(&args.eta, "eta")?.unwrap_or(1.0),
        multiplier: parse_multiplier(
            &resolver
                .get(&args.multiplier, "multiplier")?
                .unwrap_or_else(|| "rademacher".into()),
        )?,
    };

    Ok(MonteCarloConfig {
        cells,
        methods,
        n_reps: resolver.get(&args.reps, "reps")?.unwrap_or(500),
        alpha: resolver.get(&args.alpha, "alpha")?.unwrap_or(0.05),
        bootstrap_replicates: resolver.get(&args.bootstrap, "B")?.unwrap_or(profile_b),
        master_seed: resolver.seed(&args.seed)?,
        pipeline,
        workers: resolver.get(&args.workers, "workers")?,
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), RunFailure> {
    let config = match &args.from_manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                RunFailure::usage(format!("cannot read manifest {}: {e}", path.display()))
            })?;
            let manifest: SimManifest = serde_json::from_str(&text)
                .map_err(|e| RunFailure::usage(format!("bad manifest: {e}")))?;
            let mut config = manifest.config;
            if let Some(w) = args.workers {
                config.workers = Some(w);
            }
            config
        }
        None => build_simulate_config(args)?,
    };
    for cell in &config.cells {
        cell.validate().map_err(Error::from)?;
    }

    if args.dry_run {
        println!(
            "dry run: {} cells x {} replications = {} pipeline runs ({} methods each, B={})",
            config.cells.len(),
            config.n_reps,
            config.cells.len() * config.n_reps,
            config.methods.len(),
            config.bootstrap_replicates
        );
        return Ok(());
    }

    let resolver = Resolver::new(args.config.as_ref())?;
    let out_dir: PathBuf = resolver
        .get(&args.out_dir, "out-dir")?
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| RunFailure::usage(format!("cannot create {}: {e}", out_dir.display())))?;

    let table = monte_carlo(&config).map_err(Error::from)?;

    let csv_path = out_dir.join("rejections.csv");
    std::fs::write(&csv_path, table.to_csv_string())
        .map_err(|e| RunFailure::usage(format!("cannot write {}: {e}", csv_path.display())))?;

    let manifest = SimManifest {
        command: "simulate".into(),
        config,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        rows: table.rows.clone(),
        cell_errors: table.cell_errors.clone(),
        generated_at_unix: unix_timestamp(),
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| RunFailure::usage(format!("cannot write {}: {e}", manifest_path.display())))?;

    for row in &table.rows {
        println!(
            "{} {} setting={} n={}: reject {:.3} (se {:.3})",
            row.method, row.example, row.setting, row.n, row.rejection_rate, row.mc_stderr
        );
    }
    for failure in &table.cell_errors {
        eprintln!(
            "cell error: {} setting={} n={}: {}",
            failure.example, failure.setting, failure.n, failure.message
        );
    }
    println!("table: {}", csv_path.display());
    println!("manifest: {}", manifest_path.display());
    if table.cell_errors.is_empty() {
        Ok(())
    } else {
        Err(RunFailure {
            code: 3,
            message: format!("{} cell(s) failed", table.cell_errors.len()),
        })
    }
}
