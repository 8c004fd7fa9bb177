//! End-to-end analysis driver and the named experiment protocols.
//!
//! `run_analysis` is the one code path every consumer shares: resolve the
//! configuration against the data, run B independent chains with per-chain
//! seeds at a fixed offset from the master seed, merge the per-chain
//! posterior summaries by detected mass, and refit the retained models for
//! prediction.
//!
//! The named protocols pin the per-dataset settings (family, transformation
//! set, prior strength, split rule, iteration schedule, detection threshold
//! and the identities counted as true discoveries) so that benchmark runs and
//! exploratory runs share one implementation. Every setting can still be
//! overridden through the returned `RunConfig`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;
use thiserror::Error;

use crate::data::{
    load_csv, simulate_combinatorial, split, Algorithm, ConfigError, DataError, Dataset, RunConfig, SplitSpec,
};
use crate::feature::{make_crossover, make_modification, Feature, Transformation};
use crate::glm::Family;
use crate::gmjmcmc::{run_chains, ChainSpec, RunError, RunOutput, SearchContext};
use crate::inference::{
    classification_metrics, discovery_metrics, frequency_posteriors, merge_runs, model_average_predict,
    renormalized_posteriors, retained_model_fits, ClassificationMetrics, DiscoveryMetrics, InferenceError,
    ModelFit, PosteriorSummary,
};
use crate::scoring::{split_model_key, Scorer};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// Everything a finished multi-chain analysis exposes.
pub struct AnalysisResult {
    pub family: Family,
    pub eta: f64,
    pub eta_star: f64,
    pub prior_a: f64,
    pub outputs: Vec<RunOutput>,
    /// Mass-weighted merge of the per-chain summaries.
    pub merged: PosteriorSummary,
    /// Frequency-based merge (only filled for the reversible algorithm).
    pub merged_frequency: Option<PosteriorSummary>,
    /// Union of every feature seen by any chain.
    pub features: IndexMap<String, Arc<Feature>>,
    /// Retained models refit at the posterior mode for prediction.
    pub fits: Vec<ModelFit>,
}

impl AnalysisResult {
    /// Marginal inclusion of each *display identity*: the probability that a
    /// model contains at least one feature printing as that identity. Product
    /// chains of different groupings print identically, so this is the level
    /// at which detections are declared.
    pub fn display_inclusions(&self) -> IndexMap<String, f64> {
        let mut incl: IndexMap<String, f64> = IndexMap::new();
        for (model_key, p) in &self.merged.model_posteriors {
            let mut displays: Vec<String> = split_model_key(model_key)
                .iter()
                .map(|fk| self.features.get(*fk).map(|f| f.display_string()).unwrap_or_else(|| fk.to_string()))
                .collect();
            displays.sort();
            displays.dedup();
            for d in displays {
                *incl.entry(d).or_insert(0.0) += *p;
            }
        }
        incl
    }

    /// Display identities whose merged inclusion exceeds the threshold.
    pub fn detections(&self, threshold: f64) -> Vec<String> {
        self.display_inclusions().into_iter().filter(|(_, p)| *p > threshold).map(|(d, _)| d).collect()
    }
}

/// Run B chains on `dataset` under `config` and merge the results.
pub fn run_analysis(dataset: &Dataset, config: &RunConfig) -> Result<AnalysisResult, AnalysisError> {
    let resolved = config.resolve(dataset)?;
    let ctx = SearchContext::new(&dataset.x, &dataset.y, resolved.family, &resolved.gset);
    let spec = ChainSpec {
        ctx: &ctx,
        cfg: &resolved.search,
        prior_a: resolved.a,
        marginal_options: resolved.marginal_options,
        reversible: resolved.algorithm == Algorithm::Rgmjmcmc,
    };
    let outputs = run_chains(&spec, resolved.chains, resolved.seed)?;

    let summaries: Result<Vec<PosteriorSummary>, InferenceError> =
        outputs.iter().map(|o| renormalized_posteriors(&o.registry)).collect();
    let merged = merge_runs(&summaries?)?;

    let merged_frequency = if resolved.algorithm == Algorithm::Rgmjmcmc {
        let freq: Result<Vec<PosteriorSummary>, InferenceError> = outputs
            .iter()
            .map(|o| frequency_posteriors(&o.visit_counts, o.registry.log_mass_sum()))
            .collect();
        Some(merge_runs(&freq?)?)
    } else {
        None
    };

    let mut features: IndexMap<String, Arc<Feature>> = IndexMap::new();
    for out in &outputs {
        for (k, f) in &out.features {
            features.entry(k.clone()).or_insert_with(|| Arc::clone(f));
        }
    }

    let mut refit_scorer = Scorer::new(resolved.family, resolved.a, resolved.marginal_options, dataset.y.clone());
    let fits = retained_model_fits(&merged, &features, &mut refit_scorer, &dataset.x);

    Ok(AnalysisResult {
        family: resolved.family,
        eta: resolved.eta,
        eta_star: resolved.eta_star,
        prior_a: resolved.a,
        outputs,
        merged,
        merged_frequency,
        features,
        fits,
    })
}

/// The named benchmark protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentName {
    Asteroid,
    Breast,
    Spam,
    Mass,
    Kepler,
    Simstudy,
}

impl std::str::FromStr for ExperimentName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "asteroid" => Ok(Self::Asteroid),
            "breast" => Ok(Self::Breast),
            "spam" => Ok(Self::Spam),
            "mass" => Ok(Self::Mass),
            "kepler" => Ok(Self::Kepler),
            "simstudy" => Ok(Self::Simstudy),
            _ => Err(format!("unknown experiment `{s}` (expected asteroid|breast|spam|mass|kepler|simstudy)")),
        }
    }
}

impl std::fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Asteroid => "asteroid",
            Self::Breast => "breast",
            Self::Spam => "spam",
            Self::Mass => "mass",
            Self::Kepler => "kepler",
            Self::Simstudy => "simstudy",
        };
        f.write_str(s)
    }
}

/// A fully specified protocol. `data_file` is `None` when the data is
/// generated per replication.
pub struct Protocol {
    pub name: ExperimentName,
    pub data_file: Option<&'static str>,
    pub config: RunConfig,
    pub split: Option<SplitSpec>,
    /// Groups of display identities counted as the same true discovery.
    pub truth: Vec<Vec<String>>,
    pub default_chains: usize,
}

fn product_display(indices: &[usize]) -> String {
    let mut f = Feature::leaf(indices[0]);
    for i in &indices[1..] {
        f = make_crossover(&f, &Feature::leaf(*i), usize::MAX, None).unwrap();
    }
    f.display_string()
}

fn transformed_product_display(g: &str, indices: &[usize]) -> String {
    let mut f = Feature::leaf(indices[0]);
    for i in &indices[1..] {
        f = make_crossover(&f, &Feature::leaf(*i), usize::MAX, None).unwrap();
    }
    let g = Arc::new(Transformation::by_name(g).unwrap());
    make_modification(&f, &g, usize::MAX, None).unwrap().display_string()
}

/// All display renderings of `cbrt(prod(indices))` obtained by factoring the
/// cube root across subsets of the product. The absolute cube root is
/// multiplicative, so every such feature is the same function written
/// differently; a detection of any of them is a detection of the law.
fn cbrt_product_forms(indices: &[usize]) -> Vec<String> {
    let g = Arc::new(Transformation::by_name("cbrt").unwrap());
    let n = indices.len();
    let mut forms = Vec::new();
    // enumerate set partitions of the factors (n <= 3 here); cbrt applies per
    // group and the groups multiply
    let mut partitions: Vec<Vec<Vec<usize>>> = Vec::new();
    match n {
        3 => {
            let (a, b, c) = (indices[0], indices[1], indices[2]);
            partitions.push(vec![vec![a, b, c]]);
            partitions.push(vec![vec![a, b], vec![c]]);
            partitions.push(vec![vec![a, c], vec![b]]);
            partitions.push(vec![vec![b, c], vec![a]]);
            partitions.push(vec![vec![a], vec![b], vec![c]]);
        }
        _ => partitions.push(vec![indices.to_vec()]),
    }
    for groups in partitions {
        let mut factors: Vec<Arc<Feature>> = Vec::new();
        for group in &groups {
            let mut f = Feature::leaf(group[0]);
            for i in &group[1..] {
                f = make_crossover(&f, &Feature::leaf(*i), usize::MAX, None).unwrap();
            }
            factors.push(make_modification(&f, &g, usize::MAX, None).unwrap());
        }
        let mut prod = factors[0].clone();
        for f in &factors[1..] {
            prod = make_crossover(&prod, f, usize::MAX, None).unwrap();
        }
        let display = prod.display_string();
        if !forms.contains(&display) {
            forms.push(display);
        }
    }
    forms
}

/// Protocol presets. Iteration schedules are sized for commodity hardware;
/// the published studies used substantially longer chains, so expect the
/// upper rows of their tables only when scaling these up.
pub fn protocol(name: ExperimentName) -> Protocol {
    let mut config = RunConfig::default();
    match name {
        ExperimentName::Asteroid => {
            config.response = "pho".into();
            config.family = Some(Family::BernoulliLogit);
            config.transformations = "classification".into();
            config.a = "aic".into();
            config.q = 20;
            config.d_max = 5;
            config.t_max = 8;
            config.n_init = 300;
            config.n_expl = 150;
            config.n_final = 300;
            config.chains = 8;
            Protocol {
                name,
                data_file: Some("asteroid.csv"),
                config,
                split: Some(SplitSpec::BalancedBinary { per_class: 32 }),
                truth: Vec::new(),
                default_chains: 8,
            }
        }
        ExperimentName::Breast => {
            config.response = "malignant".into();
            config.family = Some(Family::BernoulliLogit);
            config.transformations = "classification".into();
            config.a = "aic".into();
            config.q = 20;
            config.d_max = 5;
            config.t_max = 10;
            config.n_init = 400;
            config.n_expl = 200;
            config.n_final = 500;
            config.chains = 8;
            Protocol {
                name,
                data_file: Some("breast_cancer.csv"),
                config,
                split: Some(SplitSpec::Fraction(0.25)),
                truth: Vec::new(),
                default_chains: 8,
            }
        }
        ExperimentName::Spam => {
            config.response = "spam".into();
            config.family = Some(Family::BernoulliLogit);
            config.transformations = "classification".into();
            config.a = "aic".into();
            config.q = 20;
            config.d_max = 5;
            config.t_max = 8;
            config.n_init = 250;
            config.n_expl = 150;
            config.n_final = 400;
            config.local_opt_steps = 1;
            config.prob_large_jump = 0.03;
            config.chains = 8;
            Protocol {
                name,
                data_file: Some("spam.csv"),
                config,
                split: Some(SplitSpec::Fraction(1536.0 / 4601.0)),
                truth: Vec::new(),
                default_chains: 8,
            }
        }
        ExperimentName::Mass => {
            // the response is the last file column, so covariate order is
            // unchanged: x1 TypeFlag, x2 RadiusJpt, x3 PeriodDays,
            // x4 SemiMajorAxisAU, x5 Eccentricity, x6 HostStarMassSlrMass,
            // x7 HostStarRadiusSlrRad, x8 HostStarMetallicity,
            // x9 HostStarTempK, x10 PlanetaryDensJpt
            config.response = "PlanetaryMassJpt".into();
            config.family = Some(Family::GaussianIdentity);
            config.transformations = "g1".into();
            config.a = "bic".into();
            config.q = 15;
            config.d_max = 5;
            config.p_mutation = 0.1;
            config.p_modification = 0.2;
            config.p_crossover = 0.45;
            config.p_projection = 0.25;
            config.t_max = 30;
            config.n_init = 400;
            config.n_expl = 250;
            config.n_final = 1000;
            config.chains = 16;
            Protocol {
                name,
                data_file: Some("exoplanet.csv"),
                config,
                split: None,
                truth: vec![vec![product_display(&[1, 1, 1, 9])]],
                default_chains: 16,
            }
        }
        ExperimentName::Kepler => {
            // removing the response shifts later columns left, so the
            // covariates are: x1 TypeFlag, x2 RadiusJpt, x3 PeriodDays,
            // x4 Eccentricity, x5 HostStarMassSlrMass,
            // x6 HostStarRadiusSlrRad, x7 HostStarMetallicity,
            // x8 HostStarTempK, x9 PlanetaryDensJpt, x10 PlanetaryMassJpt
            config.response = "SemiMajorAxisAU".into();
            config.family = Some(Family::GaussianIdentity);
            config.transformations = "g1".into();
            config.a = "bic".into();
            config.q = 15;
            config.d_max = 5;
            config.p_mutation = 0.05;
            config.p_modification = 0.35;
            config.p_crossover = 0.45;
            config.p_projection = 0.15;
            config.p_del = 0.7;
            config.s = 20;
            config.grow_f0 = true;
            config.t_max = 60;
            config.n_init = 400;
            config.n_expl = 150;
            config.n_final = 1500;
            config.chains = 16;
            Protocol {
                name,
                data_file: Some("exoplanet.csv"),
                config,
                split: None,
                truth: vec![[
                    cbrt_product_forms(&[2, 2, 4]),
                    cbrt_product_forms(&[2, 2, 5]),
                    cbrt_product_forms(&[2, 2, 7]),
                ]
                .concat()],
                default_chains: 16,
            }
        }
        ExperimentName::Simstudy => {
            config.response = "Y".into();
            config.family = Some(Family::GaussianIdentity);
            config.transformations = "g1".into();
            config.a = "bic".into();
            config.q = 20;
            config.d_max = 5;
            config.eta_star = 0.5;
            // binary covariates make unary modifications collinear, so the
            // operator mix leans on crossovers
            config.p_mutation = 0.15;
            config.p_modification = 0.05;
            config.p_crossover = 0.65;
            config.p_projection = 0.15;
            config.p_del = 0.7;
            config.s = 35;
            config.grow_f0 = true;
            config.local_opt_steps = 1;
            config.prob_large_jump = 0.04;
            config.t_max = 85;
            config.n_init = 400;
            config.n_expl = 120;
            config.n_final = 600;
            config.chains = 8;
            let truth = vec![
                vec![product_display(&[6])],
                vec![product_display(&[7])],
                vec![product_display(&[17, 20])],
                vec![product_display(&[1, 8])],
                vec![product_display(&[11, 19, 36])],
                vec![product_display(&[0, 2, 26])],
                vec![product_display(&[3, 9, 16, 29])],
                vec![product_display(&[10, 12, 18, 49])],
            ];
            Protocol { name, data_file: None, config, split: None, truth, default_chains: 8 }
        }
    }
}

/// Classification benchmark outcome over replications.
pub struct ClassificationOutcome {
    pub per_rep: Vec<ClassificationMetrics>,
    pub median_acc: f64,
    pub min_acc: f64,
    pub max_acc: f64,
}

/// Result of one named experiment.
pub struct ExperimentOutcome {
    pub name: ExperimentName,
    pub replications: usize,
    pub chains: usize,
    pub classification: Option<ClassificationOutcome>,
    pub discovery: Option<DiscoveryMetrics>,
    pub detected_per_rep: Vec<Vec<String>>,
    pub table: String,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn rep_seed(master: u64, rep: usize) -> u64 {
    master.wrapping_add(104_729u64.wrapping_mul(rep as u64 + 1))
}

/// Run a named experiment for `replications` repetitions. Data files are
/// looked up in `data_dir`; the simulated study generates its data per
/// replication.
pub fn run_experiment(
    name: ExperimentName,
    replications: usize,
    chains_override: Option<usize>,
    master_seed: u64,
    data_dir: &Path,
) -> Result<ExperimentOutcome, AnalysisError> {
    let protocol = protocol(name);
    let chains = chains_override.unwrap_or(protocol.default_chains);
    let mut config = protocol.config.clone();
    config.chains = chains;

    let base_data: Option<Dataset> = match protocol.data_file {
        Some(file) => Some(load_csv(&data_dir.join(file), &config.response)?.0),
        None => None,
    };

    let mut per_rep_metrics: Vec<ClassificationMetrics> = Vec::new();
    let mut detected_per_rep: Vec<Vec<String>> = Vec::new();

    for rep in 0..replications {
        let seed = rep_seed(master_seed, rep);
        config.seed = seed;
        let dataset = match &base_data {
            Some(ds) => ds.clone(),
            None => simulate_combinatorial(seed),
        };
        match &protocol.split {
            Some(spec) => {
                let (train, test) = split(&dataset, spec, seed ^ 0x5DEECE66D)?;
                let analysis = run_analysis(&train, &config)?;
                let preds = model_average_predict(&analysis.fits, &test.x, analysis.family, analysis.eta)?;
                let labels = preds.labels.expect("classification protocols are binomial");
                let y_true: Vec<u8> = test.y.iter().map(|v| *v as u8).collect();
                per_rep_metrics.push(classification_metrics(&labels, &y_true));
            }
            None => {
                let analysis = run_analysis(&dataset, &config)?;
                detected_per_rep.push(analysis.detections(analysis.eta_star));
            }
        }
    }

    let classification = if protocol.split.is_some() && !per_rep_metrics.is_empty() {
        let mut accs: Vec<f64> = per_rep_metrics.iter().map(|m| m.acc).collect();
        let min_acc = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_acc = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(ClassificationOutcome { per_rep: per_rep_metrics, median_acc: median(&mut accs), min_acc, max_acc })
    } else {
        None
    };
    let discovery = if protocol.split.is_none() && !detected_per_rep.is_empty() {
        Some(discovery_metrics(&detected_per_rep, &protocol.truth)?)
    } else {
        None
    };

    let table = format_table(name, replications, chains, &protocol, classification.as_ref(), discovery.as_ref());
    Ok(ExperimentOutcome {
        name,
        replications,
        chains,
        classification,
        discovery,
        detected_per_rep,
        table,
    })
}

fn format_table(
    name: ExperimentName,
    replications: usize,
    chains: usize,
    protocol: &Protocol,
    classification: Option<&ClassificationOutcome>,
    discovery: Option<&DiscoveryMetrics>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment\t{name}");
    let _ = writeln!(out, "replications\t{replications}");
    let _ = writeln!(out, "chains\t{chains}");
    if let Some(c) = classification {
        let _ = writeln!(out, "rep\tacc\tfnr\tfpr");
        for (i, m) in c.per_rep.iter().enumerate() {
            let fnr = m.fnr.map(|v| v.to_string()).unwrap_or_else(|| "undefined".into());
            let fpr = m.fpr.map(|v| v.to_string()).unwrap_or_else(|| "undefined".into());
            let _ = writeln!(out, "{}\t{:.4}\t{}\t{}", i + 1, m.acc, fnr, fpr);
        }
        let _ = writeln!(out, "median_acc\t{:.4}", c.median_acc);
        let _ = writeln!(out, "min_acc\t{:.4}", c.min_acc);
        let _ = writeln!(out, "max_acc\t{:.4}", c.max_acc);
    }
    if let Some(d) = discovery {
        let _ = writeln!(out, "truth_group\tpower");
        for (group, p) in protocol.truth.iter().zip(&d.per_group_power) {
            let _ = writeln!(out, "{}\t{:.4}", group.join(" | "), p);
        }
        let _ = writeln!(out, "overall_power\t{:.4}", d.power);
        let _ = writeln!(out, "fp\t{:.4}", d.fp);
        let _ = writeln!(out, "fdr\t{:.4}", d.fdr);
    }
    out
}

/// The bundled data directory when running inside this repository.
pub fn bundled_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("..").join("..").join("data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_truth_identities() {
        let mass = protocol(ExperimentName::Mass);
        assert_eq!(mass.truth, vec![vec!["x10*x2*x2*x2".to_string()]]);
        let kepler = protocol(ExperimentName::Kepler);
        // every factored rendering of each law surrogate counts
        assert!(kepler.truth[0].contains(&"cbrt(x3*x3*x5)".to_string()));
        assert!(kepler.truth[0].contains(&"cbrt(x3)*cbrt(x3)*cbrt(x5)".to_string()));
        assert!(kepler.truth[0].contains(&"cbrt(x3)*cbrt(x3*x5)".to_string()));
        assert!(kepler.truth[0].contains(&"cbrt(x3*x3)*cbrt(x5)".to_string()));
        assert!(kepler.truth[0].contains(&"cbrt(x3*x3*x6)".to_string()));
        assert!(kepler.truth[0].contains(&"cbrt(x3*x3*x8)".to_string()));
        assert_eq!(kepler.truth[0].len(), 12);
        let sim = protocol(ExperimentName::Simstudy);
        assert_eq!(sim.truth[2], vec!["x18*x21".to_string()]);
        assert_eq!(sim.truth[7], vec!["x11*x13*x19*x50".to_string()]);
    }

    #[test]
    fn zero_replications_yield_empty_success() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(ExperimentName::Simstudy, 0, Some(1), 1, dir.path()).unwrap();
        assert!(out.classification.is_none());
        assert!(out.discovery.is_none());
        assert!(out.table.contains("replications\t0"));
    }

    #[test]
    fn experiment_names_parse() {
        assert_eq!("mass".parse::<ExperimentName>().unwrap(), ExperimentName::Mass);
        assert!("unknown".parse::<ExperimentName>().is_err());
    }

    #[test]
    fn analysis_on_simulated_data_runs_end_to_end() {
        let ds = simulate_combinatorial(11);
        let mut cfg = RunConfig::default();
        cfg.q = 10;
        cfg.s = 25;
        cfg.t_max = 3;
        cfg.n_init = 80;
        cfg.n_expl = 60;
        cfg.n_final = 80;
        cfg.chains = 2;
        cfg.seed = 5;
        let result = run_analysis(&ds, &cfg).unwrap();
        assert_eq!(result.outputs.len(), 2);
        let total: f64 = result.merged.model_posteriors.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(!result.fits.is_empty());
        // the two strong main effects should already show up at tiny budgets
        let incl = result.display_inclusions();
        let x7 = incl.get("x7").copied().unwrap_or(0.0);
        assert!(x7 > 0.2, "x7 inclusion {x7} unexpectedly small");
    }
}
