//! Command line interface: reproducible fits, prediction from saved
//! artifacts, artifact inspection, and the named benchmark experiments.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 data error,
//! 4 runtime failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use dbrm::data::{load_columns_csv, load_csv, Algorithm, ConfigError, DataError, RunConfig};
use dbrm::experiments::{run_analysis, run_experiment, AnalysisError, AnalysisResult, ExperimentName};
use dbrm::feature::{complexity, parse_key, Feature, TransformationSet};
use dbrm::glm::Family;
use dbrm::inference::{model_average_predict, ModelFit};
use dbrm::scoring::{split_model_key, ModelRegistry};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(
    name = "dbrm",
    version,
    about = "Deep Bayesian regression: feature-engineering model search with Bayesian model averaging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model search on a dataset and write a run artifact.
    Fit(FitArgs),
    /// Model-averaged prediction on new data from a saved artifact.
    Predict(PredictArgs),
    /// Validate and summarize the files of a run artifact.
    Inspect(InspectArgs),
    /// Run a named benchmark experiment and emit its metrics table.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Flat key=value configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data (delimited text with a header row).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the run artifact.
    #[arg(long)]
    out: PathBuf,
    /// Response column (overrides the config file).
    #[arg(long)]
    response: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent chains.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_parser = ["gmjmcmc", "rgmjmcmc"])]
    algorithm: Option<String>,
    /// Classification threshold for reported labels.
    #[arg(long)]
    eta: Option<f64>,
    /// Detection threshold for the feature report.
    #[arg(long)]
    eta_star: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    /// Run artifact directory produced by `fit`.
    #[arg(long)]
    artifact: PathBuf,
    /// New data file; must contain the training covariate columns.
    #[arg(long)]
    data: PathBuf,
    /// Output file (default: predictions.tsv inside the artifact).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Classification threshold.
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct InspectArgs {
    /// Run artifact directory.
    #[arg(long)]
    artifact: PathBuf,
    /// Which file to re-emit verbatim (registry|features|models|trace);
    /// omit for a summary of everything.
    #[arg(long)]
    what: Option<String>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// asteroid | breast | spam | mass | kepler | simstudy
    #[arg(long)]
    name: String,
    #[arg(long, default_value_t = 1)]
    replications: usize,
    /// Output directory for the metrics table (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of independent chains (protocol default when omitted).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory holding the bundled data files.
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Experiment(args) => cmd_experiment(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CmdError {
    code: u8,
    message: String,
}

impl CmdError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
    fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
    fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::config(e.to_string())
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        CmdError::data(e.to_string())
    }
}

impl From<AnalysisError> for CmdError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Config(inner) => CmdError::config(inner.to_string()),
            AnalysisError::Data(inner) => CmdError::data(inner.to_string()),
            AnalysisError::Run(inner) => CmdError::runtime(inner.to_string()),
            AnalysisError::Inference(inner) => CmdError::runtime(inner.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::runtime(e.to_string())
    }
}

fn cmd_fit(args: FitArgs) -> Result<(), CmdError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(r) = args.response {
        config.response = r;
    }
    if config.response.is_empty() {
        return Err(CmdError::config("no response column given (config `response` or --response)"));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.chains = threads;
    }
    if let Some(algorithm) = args.algorithm {
        config.algorithm = if algorithm == "rgmjmcmc" { Algorithm::Rgmjmcmc } else { Algorithm::Gmjmcmc };
    }
    if let Some(eta) = args.eta {
        config.eta = eta;
    }
    if let Some(eta_star) = args.eta_star {
        config.eta_star = eta_star;
    }

    let (dataset, dropped) = load_csv(&args.data, &config.response)?;
    if dropped > 0 {
        eprintln!("note: dropped {dropped} rows with missing cells");
    }
    let analysis = run_analysis(&dataset, &config)?;

    // the snapshot pins the resolved family so predict never re-infers it
    config.family = Some(analysis.family);
    std::fs::create_dir_all(&args.out)?;
    write_artifact(&args.out, &config, &dataset.names, &analysis)?;
    println!(
        "fit complete: {} chains, {} models in registry, best log mass {:.4}",
        analysis.outputs.len(),
        merged_registry(&analysis).len(),
        analysis.outputs.iter().map(|o| o.best_log_mass).fold(f64::NEG_INFINITY, f64::max),
    );
    println!("artifact written to {}", args.out.display());
    Ok(())
}

fn merged_registry(analysis: &AnalysisResult) -> ModelRegistry {
    let mut merged = ModelRegistry::new();
    for out in &analysis.outputs {
        merged.merge_from(&out.registry);
    }
    merged
}

fn write_artifact(
    out: &Path,
    config: &RunConfig,
    covariate_names: &[String],
    analysis: &AnalysisResult,
) -> Result<(), CmdError> {
    std::fs::write(out.join("config.txt"), config.snapshot())?;
    std::fs::write(out.join("columns.txt"), covariate_names.join("\n") + "\n")?;
    let registry = merged_registry(analysis);
    std::fs::write(out.join("registry.tsv"), registry.dump())?;

    // feature report: display identities ranked by merged inclusion
    let incl = analysis.display_inclusions();
    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    for (display, p) in &incl {
        let width = analysis
            .features
            .values()
            .filter(|f| f.display_string() == *display)
            .map(|f| complexity(f).total_width)
            .min()
            .unwrap_or(0);
        rows.push((display.clone(), width, *p));
    }
    rows.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut feature_report = String::from("rank\tfeature\tcomplexity\tinclusion\n");
    for (rank, (display, width, p)) in rows.iter().enumerate() {
        let _ = writeln!(feature_report, "{}\t{}\t{}\t{}", rank + 1, display, width, p);
    }
    std::fs::write(out.join("features.tsv"), feature_report)?;

    let mut model_report = String::from("model\tposterior\tlog_mass\n");
    let mut ranked: Vec<(&String, &f64)> = analysis.merged.model_posteriors.iter().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap().then(a.0.cmp(b.0)));
    for (key, p) in &ranked {
        let lm = registry.get(key).map(|s| s.log_mass()).unwrap_or(f64::NEG_INFINITY);
        let _ = writeln!(model_report, "{}\t{}\t{}", key, p, lm);
    }
    std::fs::write(out.join("models.tsv"), model_report)?;

    let mut fits_report = String::from("model\tposterior\tcoefficients\n");
    for fit in &analysis.fits {
        let coefs: Vec<String> = fit.coefficients.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(fits_report, "{}\t{}\t{}", fit.key, fit.posterior, coefs.join(","));
    }
    std::fs::write(out.join("model_fits.tsv"), fits_report)?;

    let mut trace = String::from("chain\tgeneration\tacceptance\tbest_log_mass\tregistry_size\tpopulation\n");
    for (b, run) in analysis.outputs.iter().enumerate() {
        for rec in &run.trace {
            let _ = writeln!(
                trace,
                "{}\t{}\t{}\t{}\t{}\t{}",
                b,
                rec.generation,
                rec.acceptance_rate,
                rec.best_log_mass,
                rec.registry_size,
                rec.population_keys.join("|")
            );
        }
    }
    std::fs::write(out.join("trace.tsv"), trace)?;

    let mut meta = String::new();
    let _ = writeln!(meta, "chains = {}", analysis.outputs.len());
    let _ = writeln!(meta, "merged_models = {}", registry.len());
    for (b, run) in analysis.outputs.iter().enumerate() {
        let _ = writeln!(
            meta,
            "chain_{b} = wall_ms: {}, glm_calls: {}, models: {}, best_log_mass: {}",
            run.wall_ms, run.glm_calls, run.registry.len(), run.best_log_mass
        );
    }
    std::fs::write(out.join("run_meta.txt"), meta)?;
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CmdError> {
    let config = RunConfig::from_file(&args.artifact.join("config.txt"))?;
    let family = config.family.ok_or_else(|| CmdError::config("artifact config does not pin the family"))?;
    let gset = resolve_gset(&config, family)?;
    let eta = args.eta.unwrap_or(config.eta);

    let columns_text = std::fs::read_to_string(args.artifact.join("columns.txt"))
        .map_err(|e| CmdError::runtime(format!("artifact missing columns.txt: {e}")))?;
    let columns: Vec<String> = columns_text.lines().map(|s| s.to_string()).collect();

    let fits = read_model_fits(&args.artifact.join("model_fits.tsv"), &gset)?;
    if fits.is_empty() {
        return Err(CmdError::runtime("artifact retains no model fits"));
    }

    // load the full training-covariate layout so leaf indices line up;
    // missing columns are reported by name
    let (x_new, row_ids, dropped) = load_columns_csv(&args.data, &columns)?;
    if dropped > 0 {
        eprintln!("note: dropped {dropped} rows with missing cells");
    }

    let preds =
        model_average_predict(&fits, &x_new, family, eta).map_err(|e| CmdError::runtime(e.to_string()))?;
    let mut out = String::from("id\tscore\tlabel\n");
    for (i, id) in row_ids.iter().enumerate() {
        let label = match &preds.labels {
            Some(l) => l[i].to_string(),
            None => String::from("-"),
        };
        let _ = writeln!(out, "{}\t{}\t{}", id, preds.scores[i], label);
    }
    let path = args.out.unwrap_or_else(|| args.artifact.join("predictions.tsv"));
    std::fs::write(&path, out)?;
    println!("predictions written to {}", path.display());
    Ok(())
}

fn resolve_gset(config: &RunConfig, family: Family) -> Result<TransformationSet, CmdError> {
    let gset = match config.transformations.as_str() {
        "auto" => match family {
            Family::BernoulliLogit => TransformationSet::classification(),
            Family::GaussianIdentity => TransformationSet::g1(),
        },
        "classification" => TransformationSet::classification(),
        "g1" => TransformationSet::g1(),
        "g2" => TransformationSet::g2(),
        list => {
            let names: Vec<&str> = list.split(',').map(|s| s.trim()).collect();
            TransformationSet::from_names(&names).map_err(|e| CmdError::config(e.to_string()))?
        }
    };
    Ok(gset)
}

fn read_model_fits(path: &Path, gset: &TransformationSet) -> Result<Vec<ModelFit>, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut fits = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CmdError::runtime(format!("model_fits.tsv line {}: bad record", lineno + 1)));
        }
        let key = fields[0].to_string();
        let posterior: f64 = fields[1]
            .parse()
            .map_err(|_| CmdError::runtime(format!("model_fits.tsv line {}: bad posterior", lineno + 1)))?;
        let mut features: Vec<Arc<Feature>> = Vec::new();
        for fk in split_model_key(&key) {
            let f = parse_key(fk, gset)
                .map_err(|e| CmdError::runtime(format!("model_fits.tsv line {}: {e}", lineno + 1)))?;
            features.push(f);
        }
        let coefs: Result<Vec<f64>, _> = fields[2].split(',').map(|c| c.parse::<f64>()).collect();
        let coefs =
            coefs.map_err(|_| CmdError::runtime(format!("model_fits.tsv line {}: bad coefficients", lineno + 1)))?;
        fits.push(ModelFit::from_parts(key, posterior, features, coefs));
    }
    Ok(fits)
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CmdError> {
    let dir = &args.artifact;
    let registry_text = std::fs::read_to_string(dir.join("registry.tsv"))
        .map_err(|e| CmdError::runtime(format!("cannot read registry.tsv: {e}")))?;
    let registry = ModelRegistry::parse_dump(&registry_text)
        .map_err(|e| CmdError::runtime(format!("registry.tsv: {e}")))?;

    if let Some(what) = &args.what {
        let file = match what.as_str() {
            "registry" => {
                // re-emit from the parsed form: proves the dump round-trips
                print!("{}", registry.dump());
                return Ok(());
            }
            "features" => "features.tsv",
            "models" => "models.tsv",
            "trace" => "trace.tsv",
            other => return Err(CmdError::config(format!("unknown inspect target `{other}`"))),
        };
        let text = std::fs::read_to_string(dir.join(file))
            .map_err(|e| CmdError::runtime(format!("cannot read {file}: {e}")))?;
        print!("{text}");
        return Ok(());
    }

    let config = RunConfig::from_file(&dir.join("config.txt"))?;
    let features_text = std::fs::read_to_string(dir.join("features.tsv"))
        .map_err(|e| CmdError::runtime(format!("cannot read features.tsv: {e}")))?;
    let n_features = features_text.lines().count().saturating_sub(1);
    println!("artifact: {}", dir.display());
    println!("response: {}", config.response);
    println!("algorithm: {:?}, chains: {}", config.algorithm, config.chains);
    println!("registered models: {}", registry.len());
    println!("reported features: {n_features}");
    for line in features_text.lines().skip(1).take(5) {
        println!("  {line}");
    }
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<(), CmdError> {
    let name: ExperimentName = args.name.parse().map_err(CmdError::config)?;
    let outcome = run_experiment(name, args.replications, args.threads, args.seed, &args.data_dir)?;
    print!("{}", outcome.table);
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        let path = out.join(format!("{name}_metrics.tsv"));
        std::fs::write(&path, &outcome.table)?;
        println!("table written to {}", path.display());
    }
    Ok(())
}
