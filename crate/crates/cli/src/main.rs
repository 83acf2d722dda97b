use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rdhetero::bandwidth::resolve_policy;
use rdhetero::covariates::{classify_heterogeneity, parse_covariate_spec, referenced_columns};
use rdhetero::data::{load_csv, ColumnRoles, Sample};
use rdhetero::estimator::{estimate, BandwidthPolicy, EstimationConfig};
use rdhetero::kernel::KernelKind;
use rdhetero::montecarlo::{coverage_experiment, ClusterSpec, DgpPreset, DgpSpec};
use rdhetero::posthoc::{lincom, parse_combo, wald_test};
use rdhetero::report;
use rdhetero::results::ResultsFile;
use rdhetero::wls::VceKind;
use rdhetero::RdError;

#[derive(Parser)]
#[command(
    name = "rdhetero",
    version,
    about = "Heterogeneous treatment effects in sharp RD designs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate effects with robust bias-corrected inference.
    Rdhte(RdhteArgs),
    /// Select MSE-optimal bandwidths.
    Rdbwhte(BwArgs),
    /// Linear combinations and joint tests of saved estimates.
    Lincom(LincomArgs),
    /// Coverage experiment on a simulated design.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Outcome column.
    #[arg(long)]
    outcome: String,
    /// Running variable (score) column.
    #[arg(long)]
    score: String,
    /// Treatment starts at score >= cutoff.
    #[arg(long, allow_hyphen_values = true)]
    cutoff: f64,
    /// Heterogeneity covariates, e.g. "i.region" or "i.a##c.b".
    #[arg(long)]
    hetero: Option<String>,
    /// Efficiency covariates (space or comma separated).
    #[arg(long = "covs-eff")]
    covs_eff: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    /// triangular, uniform or epanechnikov.
    #[arg(long, default_value = "triangular")]
    kernel: KernelKind,
    /// Polynomial order in the score.
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Order of the covariate interactions (defaults to p).
    #[arg(long)]
    s: Option<usize>,
    /// hc0, hc1, hc2, hc3, cluster:NAME or cluster_hc2:NAME [default: hc3,
    /// or cluster_hc2 when --cluster is given].
    #[arg(long)]
    vce: Option<VceKind>,
    /// Cluster column. With --vce hc1 or hc2 selects that cluster-robust
    /// variant.
    #[arg(long)]
    cluster: Option<String>,
    /// One bandwidth for all groups.
    #[arg(long)]
    bwjoint: bool,
    /// Drop the regularization term from the bandwidth selector.
    #[arg(long = "no-regularization")]
    no_regularization: bool,
}

#[derive(Args)]
struct RdhteArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Bandwidth for every group (selected from the data when absent).
    #[arg(long, conflicts_with = "h_per_group")]
    h: Option<f64>,
    /// Bandwidths per subgroup: "label=h,label=h".
    #[arg(long = "h-per-group", conflicts_with = "bwjoint")]
    h_per_group: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Write the results file here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BwArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Write the bandwidths as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LincomArgs {
    /// Results file written by `rdhte --out`.
    #[arg(long)]
    results: PathBuf,
    /// Combination such as "G1 - G0"; repeat for several.
    #[arg(long, required = true, allow_hyphen_values = true)]
    combo: Vec<String>,
    /// Also test all combinations jointly.
    #[arg(long)]
    joint: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// linear, quadratic, cubic or subgroup.
    #[arg(long, default_value = "quadratic")]
    dgp: DgpPreset,
    /// Replications (at least 100).
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Sample size per replication.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Noise standard deviation (preset default when absent).
    #[arg(long)]
    noise: Option<f64>,
    /// Number of clusters with a random effect of sd --cluster-sd.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long = "cluster-sd", default_value_t = 0.1)]
    cluster_sd: f64,
    /// Heterogeneity expression (preset default when absent).
    #[arg(long)]
    hetero: Option<String>,
    #[arg(long, default_value = "triangular")]
    kernel: KernelKind,
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Variance estimator [default: hc3, or cluster_hc2 with --clusters].
    #[arg(long)]
    vce: Option<VceKind>,
    /// Manual bandwidth (selected in each replication when absent).
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Write both coverage reports as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error after argument parsing; usage errors exit with 2, everything else 1.
enum Failure {
    Usage(String),
    Runtime(RdError),
}

impl From<RdError> for Failure {
    fn from(e: RdError) -> Self {
        Failure::Runtime(e)
    }
}

fn split_names(s: &str) -> Vec<String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn load(args: &DataArgs, vce: &VceKind) -> Result<Sample, Failure> {
    let hetero = match &args.hetero {
        Some(e) => referenced_columns(e)?,
        None => Vec::new(),
    };
    let roles = ColumnRoles {
        outcome: args.outcome.clone(),
        score: args.score.clone(),
        hetero,
        efficiency: args.covs_eff.as_deref().map(split_names).unwrap_or_default(),
        cluster: vce.cluster_column().map(str::to_string),
    };
    Ok(load_csv(&args.data, &roles)?)
}

fn parse_per_group(s: &str) -> Result<BTreeMap<String, f64>, Failure> {
    let mut map = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .rsplit_once('=')
            .ok_or_else(|| Failure::Usage(format!("--h-per-group entry `{part}` is not label=h")))?;
        let h: f64 = v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("--h-per-group value `{v}` is not a number")))?;
        map.insert(k.trim().to_string(), h);
    }
    if map.is_empty() {
        return Err(Failure::Usage("--h-per-group is empty".into()));
    }
    Ok(map)
}

/// Combine `--vce` and `--cluster`: clustering alone means cluster_hc2,
/// `hc1`/`hc2` with a cluster column mean their cluster-robust versions.
fn resolve_vce(vce: Option<&VceKind>, cluster: Option<&str>) -> Result<VceKind, Failure> {
    let Some(column) = cluster else {
        return Ok(vce.cloned().unwrap_or_default());
    };
    let column = column.to_string();
    match vce {
        None | Some(VceKind::Hc2) => Ok(VceKind::ClusterHc2 { column }),
        Some(VceKind::Hc1) => Ok(VceKind::ClusterHc1 { column }),
        Some(v) if v.cluster_column() == Some(column.as_str()) => Ok(v.clone()),
        Some(v) if v.is_cluster() => Err(Failure::Usage(format!(
            "--vce {} and --cluster {column} name different cluster columns",
            v.spec()
        ))),
        Some(v) => Err(Failure::Usage(format!(
            "--vce {} has no cluster-robust version; use hc1 or hc2 with --cluster",
            v.spec()
        ))),
    }
}

fn base_config(data: &DataArgs, fit: &FitArgs) -> Result<EstimationConfig, Failure> {
    Ok(EstimationConfig {
        cutoff: data.cutoff,
        p: fit.p,
        s: fit.s,
        kernel: fit.kernel,
        vce: resolve_vce(fit.vce.as_ref(), fit.cluster.as_deref())?,
        bandwidth: BandwidthPolicy::Auto { joint: fit.bwjoint },
        regularize: !fit.no_regularization,
        ..Default::default()
    })
}

fn cmd_rdhte(args: RdhteArgs) -> Result<(), Failure> {
    let mut config = base_config(&args.data, &args.fit)?;
    config.level = args.level;
    if let Some(h) = args.h {
        config.bandwidth = BandwidthPolicy::Manual {
            h,
            joint: args.fit.bwjoint,
        };
    } else if let Some(spec) = &args.h_per_group {
        config.bandwidth = BandwidthPolicy::PerGroup(parse_per_group(spec)?);
    }
    let sample = load(&args.data, &config.vce)?;
    let result = estimate(&sample, args.data.hetero.as_deref(), &config)?;
    print!("{}", report::result_table(&result));
    if let Some(path) = &args.out {
        ResultsFile::new(result).save(path)?;
    }
    Ok(())
}

fn cmd_rdbwhte(args: BwArgs) -> Result<(), Failure> {
    let config = base_config(&args.data, &args.fit)?;
    let sample = load(&args.data, &config.vce)?;
    let design = match args.data.hetero.as_deref().map(str::trim).filter(|e| !e.is_empty()) {
        Some(expr) => {
            let spec = parse_covariate_spec(expr, &sample)?;
            Some(classify_heterogeneity(&spec, &sample)?)
        }
        None => None,
    };
    let bw = resolve_policy(&sample, design.as_ref(), &config)?;
    print!("{}", report::bandwidth_table(&bw, &config));
    if let Some(path) = &args.out {
        let mut text = serde_json::to_string_pretty(&bw).map_err(RdError::from)?;
        text.push('\n');
        std::fs::write(path, text).map_err(RdError::from)?;
    }
    Ok(())
}

fn cmd_lincom(args: LincomArgs) -> Result<(), Failure> {
    let file = ResultsFile::load(&args.results)?;
    let result = &file.result;
    let labels = result.labels();
    let combos = args
        .combo
        .iter()
        .map(|c| parse_combo(c, &labels))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = combos
        .iter()
        .map(|c| Ok((c.expr.clone(), lincom(result, c)?)))
        .collect::<Result<Vec<_>, RdError>>()?;
    let wald = if args.joint {
        Some(wald_test(result, &combos)?)
    } else {
        None
    };
    println!(
        "Linear combinations of bias-corrected estimates ({} rows, {})",
        labels.len(),
        match result.covariance {
            rdhetero::estimator::CovarianceStructure::IndependentFits => "independent fits",
            rdhetero::estimator::CovarianceStructure::JointFit => "joint fit",
        }
    );
    println!();
    print!("{}", report::lincom_table(&rows, result.config.level, wald.as_ref()));
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut spec = DgpSpec::new(args.dgp, args.n, args.seed);
    if let Some(sd) = args.noise {
        spec.noise_sd = sd;
    }
    if let Some(groups) = args.clusters {
        spec.clusters = Some(ClusterSpec {
            groups,
            sd: args.cluster_sd,
        });
    }
    let config = EstimationConfig {
        p: args.p,
        kernel: args.kernel,
        vce: match (&args.vce, args.clusters) {
            (Some(v), _) => v.clone(),
            (None, Some(_)) => VceKind::ClusterHc2 {
                column: "cluster".into(),
            },
            (None, None) => VceKind::default(),
        },
        level: args.level,
        bandwidth: match args.h {
            Some(h) => BandwidthPolicy::Manual { h, joint: false },
            None => BandwidthPolicy::Auto { joint: false },
        },
        ..Default::default()
    };
    if config.vce.is_cluster() && spec.clusters.is_none() {
        return Err(Failure::Usage("a cluster variance needs --clusters".into()));
    }
    let hetero = args.hetero.unwrap_or_else(|| args.dgp.hetero_expr().to_string());
    let mut reports = Vec::new();
    for h in [None, Some(hetero.as_str())] {
        let rep = coverage_experiment(&spec, &config, h, args.reps)?;
        print!("{}", report::coverage_table(&rep));
        println!();
        reports.push(rep);
    }
    if let Some(path) = &args.out {
        let mut text = serde_json::to_string_pretty(&reports).map_err(RdError::from)?;
        text.push('\n');
        std::fs::write(path, text).map_err(RdError::from)?;
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("RDHETERO_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("RDHETERO_THREADS must be a positive integer, got `{v}`")))?;
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Rdhte(a) => cmd_rdhte(a),
        Command::Rdbwhte(a) => cmd_rdbwhte(a),
        Command::Lincom(a) => cmd_lincom(a),
        Command::Simulate(a) => cmd_simulate(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(1)
        }
    }
}
