//! Dataset ingestion, train/test splitting, simulation generators and run
//! configuration.
//!
//! Input files are delimited text with a header row. Rows containing missing
//! or unparseable numeric cells are dropped (and counted) at load time, so
//! everything downstream sees a dense finite matrix. Run configuration is a
//! flat `key = value` text format with typed parsing and documented defaults.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::feature::TransformationSet;
use crate::glm::{Family, MarginalOptions};
use crate::gmjmcmc::GmjmcmcConfig;

/// A dense, finite dataset: covariate matrix, response, and column names.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub names: Vec<String>,
    pub response_name: String,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.x.ncols()
    }

    pub fn response_is_binary(&self) -> bool {
        self.y.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    fn from_rows(rows: &[Vec<f64>], response_idx: usize, names: &[String]) -> Dataset {
        let n = rows.len();
        let m = names.len() - 1;
        let mut x = DMatrix::zeros(n, m);
        let mut y = DVector::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            let mut k = 0;
            for (j, v) in row.iter().enumerate() {
                if j == response_idx {
                    y[i] = *v;
                } else {
                    x[(i, k)] = *v;
                    k += 1;
                }
            }
        }
        let mut covariate_names = Vec::with_capacity(m);
        for (j, name) in names.iter().enumerate() {
            if j != response_idx {
                covariate_names.push(name.clone());
            }
        }
        Dataset { x, y, names: covariate_names, response_name: names[response_idx].clone() }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file has a header but no data rows")]
    NoRows { path: String },
    #[error("{path}: response column `{column}` not found in header")]
    MissingResponse { path: String, column: String },
    #[error("{path}: row {row}, column `{column}`: unparseable cell `{cell}`")]
    BadCell { path: String, row: usize, column: String, cell: String },
    #[error("requested class balance is infeasible: need {need} of class {class}, have {have}")]
    InfeasibleBalance { need: usize, class: u8, have: usize },
    #[error("invalid split specification: {0}")]
    BadSplit(String),
    #[error("binary response required but `{0}` has non 0/1 values")]
    NotBinary(String),
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan") || c == "?"
}

/// Load a delimited file (comma, tab or semicolon sniffed from the header).
/// Rows with any missing cell are dropped; the count of dropped rows comes
/// back alongside the dataset. A cell that is neither numeric nor missing is
/// an error naming the row and column.
pub fn load_csv(path: &Path, response_column: &str) -> Result<(Dataset, usize), DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    load_csv_str(&text, response_column, &path.display().to_string())
}

pub fn load_csv_str(text: &str, response_column: &str, path: &str) -> Result<(Dataset, usize), DataError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DataError::NoRows { path: path.to_string() })?;
    let delim = if header.contains('\t') {
        '\t'
    } else if header.contains(';') && !header.contains(',') {
        ';'
    } else {
        ','
    };
    let names: Vec<String> = header.split(delim).map(|s| s.trim().to_string()).collect();
    let response_idx = names
        .iter()
        .position(|n| n == response_column)
        .ok_or_else(|| DataError::MissingResponse { path: path.to_string(), column: response_column.to_string() })?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(delim).collect();
        if cells.len() != names.len() {
            return Err(DataError::BadCell {
                path: path.to_string(),
                row: lineno + 2,
                column: format!("(expected {} cells, got {})", names.len(), cells.len()),
                cell: String::new(),
            });
        }
        let mut row = Vec::with_capacity(cells.len());
        let mut missing = false;
        for (j, cell) in cells.iter().enumerate() {
            if is_missing(cell) {
                missing = true;
                break;
            }
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                Ok(_) => {
                    missing = true;
                    break;
                }
                Err(_) => {
                    return Err(DataError::BadCell {
                        path: path.to_string(),
                        row: lineno + 2,
                        column: names[j].clone(),
                        cell: cell.trim().to_string(),
                    })
                }
            }
        }
        if missing {
            dropped += 1;
        } else {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(DataError::NoRows { path: path.to_string() });
    }
    Ok((Dataset::from_rows(&rows, response_idx, &names), dropped))
}

/// Load only the named columns from a delimited file (for prediction, where
/// the response may be absent and extra columns may be non-numeric). Returns
/// the matrix in the requested column order, the 1-based data-row ids of the
/// kept rows, and the number of rows dropped for missing cells.
pub fn load_columns_csv(
    path: &Path,
    required: &[String],
) -> Result<(DMatrix<f64>, Vec<usize>, usize), DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let display = path.display().to_string();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DataError::NoRows { path: display.clone() })?;
    let delim = if header.contains('\t') {
        '\t'
    } else if header.contains(';') && !header.contains(',') {
        ';'
    } else {
        ','
    };
    let names: Vec<&str> = header.split(delim).map(|s| s.trim()).collect();
    let mut positions = Vec::with_capacity(required.len());
    for want in required {
        let pos = names
            .iter()
            .position(|n| n == want)
            .ok_or_else(|| DataError::MissingResponse { path: display.clone(), column: want.clone() })?;
        positions.push(pos);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ids: Vec<usize> = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(delim).collect();
        let mut row = Vec::with_capacity(positions.len());
        let mut missing = false;
        for (k, pos) in positions.iter().enumerate() {
            let cell = cells.get(*pos).copied().unwrap_or("");
            if is_missing(cell) {
                missing = true;
                break;
            }
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(DataError::BadCell {
                        path: display.clone(),
                        row: lineno + 2,
                        column: required[k].clone(),
                        cell: cell.trim().to_string(),
                    })
                }
            }
        }
        if missing {
            dropped += 1;
        } else {
            rows.push(row);
            ids.push(lineno + 1);
        }
    }
    if rows.is_empty() {
        return Err(DataError::NoRows { path: display });
    }
    let mut x = DMatrix::zeros(rows.len(), required.len());
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    Ok((x, ids, dropped))
}

/// Write a dataset back out (covariates then response, comma separated).
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    let mut header: Vec<&str> = dataset.names.iter().map(|s| s.as_str()).collect();
    header.push(&dataset.response_name);
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..dataset.n() {
        for j in 0..dataset.m() {
            let _ = write!(out, "{},", dataset.x[(i, j)]);
        }
        let _ = writeln!(out, "{}", dataset.y[i]);
    }
    std::fs::write(path, out).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Simulated Gaussian response over 50 independent Bernoulli(0.5) covariates
/// with two main effects, two two-way, two three-way and two four-way
/// interactions, unit error variance, n = 1000.
pub fn simulate_combinatorial(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1000;
    let p = 50;
    let x = DMatrix::from_fn(n, p, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let noise: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
    let v = |i: usize, j: usize| x[(i, j - 1)];
    let y = DVector::from_fn(n, |i, _| {
        1.0 + 1.5 * v(i, 7)
            + 1.5 * v(i, 8)
            + 6.6 * v(i, 18) * v(i, 21)
            + 3.5 * v(i, 2) * v(i, 9)
            + 9.0 * v(i, 12) * v(i, 20) * v(i, 37)
            + 7.0 * v(i, 1) * v(i, 3) * v(i, 27)
            + 7.0 * v(i, 4) * v(i, 10) * v(i, 17) * v(i, 30)
            + 7.0 * v(i, 11) * v(i, 13) * v(i, 19) * v(i, 50)
            + noise[i]
    });
    let names = (1..=p).map(|j| format!("X{j}")).collect();
    Dataset { x, y, names, response_name: "Y".to_string() }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// How to cut a dataset into train and test.
#[derive(Clone, Debug)]
pub enum SplitSpec {
    /// Random train fraction in [0, 1].
    Fraction(f64),
    /// Exactly this many training rows per binary class.
    BalancedBinary { per_class: usize },
    /// Explicit training row indices.
    Indices(Vec<usize>),
}

/// Disjoint, exhaustive train/test split, reproducible under the seed.
pub fn split(dataset: &Dataset, spec: &SplitSpec, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let n = dataset.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_idx: Vec<usize> = match spec {
        SplitSpec::Fraction(f) => {
            if !(0.0..=1.0).contains(f) {
                return Err(DataError::BadSplit(format!("fraction {f} outside [0,1]")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            shuffle(&mut idx, &mut rng);
            let k = ((n as f64) * f).round() as usize;
            let mut take: Vec<usize> = idx.into_iter().take(k).collect();
            take.sort_unstable();
            take
        }
        SplitSpec::BalancedBinary { per_class } => {
            if !dataset.response_is_binary() {
                return Err(DataError::NotBinary(dataset.response_name.clone()));
            }
            let mut ones: Vec<usize> = (0..n).filter(|i| dataset.y[*i] == 1.0).collect();
            let mut zeros: Vec<usize> = (0..n).filter(|i| dataset.y[*i] == 0.0).collect();
            if ones.len() < *per_class {
                return Err(DataError::InfeasibleBalance { need: *per_class, class: 1, have: ones.len() });
            }
            if zeros.len() < *per_class {
                return Err(DataError::InfeasibleBalance { need: *per_class, class: 0, have: zeros.len() });
            }
            shuffle(&mut ones, &mut rng);
            shuffle(&mut zeros, &mut rng);
            let mut take: Vec<usize> =
                ones.into_iter().take(*per_class).chain(zeros.into_iter().take(*per_class)).collect();
            take.sort_unstable();
            take
        }
        SplitSpec::Indices(indices) => {
            let mut take = indices.clone();
            take.sort_unstable();
            take.dedup();
            if take.iter().any(|i| *i >= n) {
                return Err(DataError::BadSplit("index out of range".to_string()));
            }
            take
        }
    };
    let in_train: Vec<bool> = {
        let mut flags = vec![false; n];
        for i in &train_idx {
            flags[*i] = true;
        }
        flags
    };
    let take_rows = |keep: bool| -> Dataset {
        let rows: Vec<usize> = (0..n).filter(|i| in_train[*i] == keep).collect();
        let mut x = DMatrix::zeros(rows.len(), dataset.m());
        let mut y = DVector::zeros(rows.len());
        for (new_i, old_i) in rows.iter().enumerate() {
            for j in 0..dataset.m() {
                x[(new_i, j)] = dataset.x[(*old_i, j)];
            }
            y[new_i] = dataset.y[*old_i];
        }
        Dataset { x, y, names: dataset.names.clone(), response_name: dataset.response_name.clone() }
    };
    Ok((take_rows(true), take_rows(false)))
}

fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
}

/// Which search algorithm to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Gmjmcmc,
    Rgmjmcmc,
}

/// Flat run configuration with documented defaults. `auto` fields resolve
/// against the dataset (family from the response, prior strength and
/// transformation set from the family).
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub family: Option<Family>,
    /// Preset name (`classification`, `g1`, `g2`) or comma list of
    /// transformation names.
    pub transformations: String,
    pub d_max: usize,
    /// 0 means: family default (20 logistic, 15 gaussian).
    pub q: usize,
    /// Prior base: `auto` (family default), `aic` (e^-2),
    /// `bic` (e^(-2 ln n)) or a literal value in (0,1).
    pub a: String,
    /// 0 means: derive from the problem size.
    pub s: usize,
    pub t_max: usize,
    pub n_init: usize,
    pub n_expl: usize,
    pub n_final: usize,
    pub final_unique_models: usize,
    pub p_mutation: f64,
    pub p_modification: f64,
    pub p_crossover: f64,
    pub p_projection: f64,
    pub p_del: f64,
    pub filtration_threshold: f64,
    pub keep_always: Vec<usize>,
    pub adaptive: bool,
    pub chains: usize,
    pub seed: u64,
    pub eta: f64,
    pub eta_star: f64,
    pub algorithm: Algorithm,
    pub rgm_outer_steps: usize,
    pub rgm_local_steps: usize,
    pub rho_r: f64,
    pub prob_large_jump: f64,
    pub jump_size_min: usize,
    pub jump_size_max: usize,
    pub local_opt_steps: usize,
    pub randomize_prob: f64,
    pub include_laplace_constant: bool,
    /// Let the mutation pool grow with previously seen features.
    pub grow_f0: bool,
    pub response: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            family: None,
            transformations: "auto".to_string(),
            d_max: 5,
            q: 0,
            a: "auto".to_string(),
            s: 0,
            t_max: 20,
            n_init: 500,
            n_expl: 250,
            n_final: 1000,
            final_unique_models: 0,
            p_mutation: 0.1,
            p_modification: 0.3,
            p_crossover: 0.3,
            p_projection: 0.3,
            p_del: 1.0,
            filtration_threshold: 0.1,
            keep_always: Vec::new(),
            adaptive: true,
            chains: 1,
            seed: 1,
            eta: 0.5,
            eta_star: 0.25,
            algorithm: Algorithm::Gmjmcmc,
            rgm_outer_steps: 500,
            rgm_local_steps: 10,
            rho_r: 0.02,
            prob_large_jump: 0.05,
            jump_size_min: 0,
            jump_size_max: 0,
            local_opt_steps: 2,
            randomize_prob: 0.1,
            include_laplace_constant: true,
            grow_f0: false,
            response: String::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("config field `{field}`: {message}")]
    BadValue { field: String, message: String },
    #[error("unknown config field `{field}`")]
    UnknownField { field: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn parse_as<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, ConfigError> {
    value.parse::<T>().map_err(|_| ConfigError::BadValue {
        field: field.to_string(),
        message: format!("cannot parse `{value}`"),
    })
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_str_cfg(&text)
    }

    pub fn from_str_cfg(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { line: lineno + 1, text: line.to_string() })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "family" => {
                self.family = match value {
                    "auto" => None,
                    "gaussian" => Some(Family::GaussianIdentity),
                    "binomial" | "bernoulli" | "logistic" => Some(Family::BernoulliLogit),
                    _ => {
                        return Err(ConfigError::BadValue {
                            field: key.into(),
                            message: format!("`{value}` is not one of auto|gaussian|binomial"),
                        })
                    }
                }
            }
            "transformations" => self.transformations = value.to_string(),
            "d_max" => self.d_max = parse_as(key, value)?,
            "q" => self.q = parse_as(key, value)?,
            "a" => {
                if value != "auto" && value != "aic" && value != "bic" {
                    let v: f64 = parse_as(key, value)?;
                    if !(v > 0.0 && v < 1.0) {
                        return Err(ConfigError::BadValue { field: key.into(), message: "a must lie in (0,1)".into() });
                    }
                }
                self.a = value.to_string();
            }
            "s" => self.s = parse_as(key, value)?,
            "t_max" => self.t_max = parse_as(key, value)?,
            "n_init" => self.n_init = parse_as(key, value)?,
            "n_expl" => self.n_expl = parse_as(key, value)?,
            "n_final" => self.n_final = parse_as(key, value)?,
            "final_unique_models" => self.final_unique_models = parse_as(key, value)?,
            "p_mutation" => self.p_mutation = parse_as(key, value)?,
            "p_modification" => self.p_modification = parse_as(key, value)?,
            "p_crossover" => self.p_crossover = parse_as(key, value)?,
            "p_projection" => self.p_projection = parse_as(key, value)?,
            "p_del" => self.p_del = parse_as(key, value)?,
            "filtration_threshold" => self.filtration_threshold = parse_as(key, value)?,
            "keep_always" => {
                self.keep_always = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse_as::<usize>(key, v.trim()))
                        .collect::<Result<Vec<_>, _>>()?
                };
            }
            "adaptive" => self.adaptive = parse_as(key, value)?,
            "chains" | "threads" => self.chains = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "eta" => self.eta = parse_as(key, value)?,
            "eta_star" => self.eta_star = parse_as(key, value)?,
            "algorithm" => {
                self.algorithm = match value {
                    "gmjmcmc" => Algorithm::Gmjmcmc,
                    "rgmjmcmc" => Algorithm::Rgmjmcmc,
                    _ => {
                        return Err(ConfigError::BadValue {
                            field: key.into(),
                            message: format!("`{value}` is not one of gmjmcmc|rgmjmcmc"),
                        })
                    }
                }
            }
            "rgm_outer_steps" => self.rgm_outer_steps = parse_as(key, value)?,
            "rgm_local_steps" => self.rgm_local_steps = parse_as(key, value)?,
            "rho_r" => self.rho_r = parse_as(key, value)?,
            "prob_large_jump" => self.prob_large_jump = parse_as(key, value)?,
            "jump_size_min" => self.jump_size_min = parse_as(key, value)?,
            "jump_size_max" => self.jump_size_max = parse_as(key, value)?,
            "local_opt_steps" => self.local_opt_steps = parse_as(key, value)?,
            "randomize_prob" => self.randomize_prob = parse_as(key, value)?,
            "include_laplace_constant" => self.include_laplace_constant = parse_as(key, value)?,
            "grow_f0" => self.grow_f0 = parse_as(key, value)?,
            "response" => self.response = value.to_string(),
            _ => return Err(ConfigError::UnknownField { field: key.to_string() }),
        }
        Ok(())
    }

    /// Flat snapshot of every field (valid input for `from_str_cfg`).
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let family = match self.family {
            None => "auto",
            Some(Family::GaussianIdentity) => "gaussian",
            Some(Family::BernoulliLogit) => "binomial",
        };
        let algorithm = match self.algorithm {
            Algorithm::Gmjmcmc => "gmjmcmc",
            Algorithm::Rgmjmcmc => "rgmjmcmc",
        };
        let keep: Vec<String> = self.keep_always.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(out, "family = {family}");
        let _ = writeln!(out, "transformations = {}", self.transformations);
        let _ = writeln!(out, "d_max = {}", self.d_max);
        let _ = writeln!(out, "q = {}", self.q);
        let _ = writeln!(out, "a = {}", self.a);
        let _ = writeln!(out, "s = {}", self.s);
        let _ = writeln!(out, "t_max = {}", self.t_max);
        let _ = writeln!(out, "n_init = {}", self.n_init);
        let _ = writeln!(out, "n_expl = {}", self.n_expl);
        let _ = writeln!(out, "n_final = {}", self.n_final);
        let _ = writeln!(out, "final_unique_models = {}", self.final_unique_models);
        let _ = writeln!(out, "p_mutation = {}", self.p_mutation);
        let _ = writeln!(out, "p_modification = {}", self.p_modification);
        let _ = writeln!(out, "p_crossover = {}", self.p_crossover);
        let _ = writeln!(out, "p_projection = {}", self.p_projection);
        let _ = writeln!(out, "p_del = {}", self.p_del);
        let _ = writeln!(out, "filtration_threshold = {}", self.filtration_threshold);
        let _ = writeln!(out, "keep_always = {}", keep.join(","));
        let _ = writeln!(out, "adaptive = {}", self.adaptive);
        let _ = writeln!(out, "chains = {}", self.chains);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "eta = {}", self.eta);
        let _ = writeln!(out, "eta_star = {}", self.eta_star);
        let _ = writeln!(out, "algorithm = {algorithm}");
        let _ = writeln!(out, "rgm_outer_steps = {}", self.rgm_outer_steps);
        let _ = writeln!(out, "rgm_local_steps = {}", self.rgm_local_steps);
        let _ = writeln!(out, "rho_r = {}", self.rho_r);
        let _ = writeln!(out, "prob_large_jump = {}", self.prob_large_jump);
        let _ = writeln!(out, "jump_size_min = {}", self.jump_size_min);
        let _ = writeln!(out, "jump_size_max = {}", self.jump_size_max);
        let _ = writeln!(out, "local_opt_steps = {}", self.local_opt_steps);
        let _ = writeln!(out, "randomize_prob = {}", self.randomize_prob);
        let _ = writeln!(out, "include_laplace_constant = {}", self.include_laplace_constant);
        let _ = writeln!(out, "grow_f0 = {}", self.grow_f0);
        let _ = writeln!(out, "response = {}", self.response);
        out
    }

    /// Resolve every `auto` field against a dataset.
    pub fn resolve(&self, dataset: &Dataset) -> Result<ResolvedConfig, ConfigError> {
        let family = self.family.unwrap_or(if dataset.response_is_binary() {
            Family::BernoulliLogit
        } else {
            Family::GaussianIdentity
        });
        if family == Family::BernoulliLogit && !dataset.response_is_binary() {
            return Err(ConfigError::BadValue {
                field: "family".into(),
                message: format!("binomial family but response `{}` is not 0/1", dataset.response_name),
            });
        }
        let gset = match self.transformations.as_str() {
            "auto" => match family {
                Family::BernoulliLogit => TransformationSet::classification(),
                Family::GaussianIdentity => TransformationSet::g1(),
            },
            "classification" => TransformationSet::classification(),
            "g1" => TransformationSet::g1(),
            "g2" => TransformationSet::g2(),
            list => {
                let names: Vec<&str> = list.split(',').map(|s| s.trim()).collect();
                TransformationSet::from_names(&names).map_err(|e| ConfigError::BadValue {
                    field: "transformations".into(),
                    message: e.to_string(),
                })?
            }
        };
        let n = dataset.n() as f64;
        let a = match self.a.as_str() {
            "aic" => (-2.0f64).exp(),
            "bic" => (-2.0 * n.ln()).exp(),
            "auto" => match family {
                Family::BernoulliLogit => (-2.0f64).exp(),
                Family::GaussianIdentity => (-2.0 * n.ln()).exp(),
            },
            lit => lit.parse::<f64>().expect("validated at parse time"),
        };
        let q = if self.q == 0 {
            match family {
                Family::BernoulliLogit => 20,
                Family::GaussianIdentity => 15,
            }
        } else {
            self.q
        };
        let mut search = GmjmcmcConfig::for_problem(dataset.m(), q, self.d_max);
        if self.s != 0 {
            search.s = self.s;
            search.q = q.min(self.s);
            search.mjmcmc.max_model_size = search.q;
        }
        search.t_max = self.t_max;
        search.n_init = self.n_init;
        search.n_expl = self.n_expl;
        search.n_final = self.n_final;
        search.final_unique_models = if self.final_unique_models == 0 { None } else { Some(self.final_unique_models) };
        search.p_mutation = self.p_mutation;
        search.p_modification = self.p_modification;
        search.p_crossover = self.p_crossover;
        search.p_projection = self.p_projection;
        search.p_del = self.p_del;
        search.filtration_threshold = self.filtration_threshold;
        search.keep_always = self.keep_always.clone();
        search.adaptive = self.adaptive;
        search.rho_r = self.rho_r;
        search.rgm_outer_steps = self.rgm_outer_steps;
        search.rgm_local_steps = self.rgm_local_steps;
        search.grow_f0 = self.grow_f0;
        search.mjmcmc.prob_large_jump = self.prob_large_jump;
        search.mjmcmc.local_opt_steps = self.local_opt_steps;
        search.mjmcmc.randomize_prob = self.randomize_prob;
        if self.jump_size_min != 0 {
            search.mjmcmc.jump_size_min = self.jump_size_min;
        }
        if self.jump_size_max != 0 {
            search.mjmcmc.jump_size_max = self.jump_size_max.min(search.s);
        }
        search.validate().map_err(|message| ConfigError::BadValue { field: "search".into(), message })?;
        Ok(ResolvedConfig {
            family,
            gset,
            a,
            search,
            chains: self.chains.max(1),
            seed: self.seed,
            eta: self.eta,
            eta_star: self.eta_star,
            algorithm: self.algorithm,
            marginal_options: MarginalOptions { include_laplace_constant: self.include_laplace_constant },
        })
    }
}

/// A run configuration with every `auto` resolved.
pub struct ResolvedConfig {
    pub family: Family,
    pub gset: TransformationSet,
    pub a: f64,
    pub search: GmjmcmcConfig,
    pub chains: usize,
    pub seed: u64,
    pub eta: f64,
    pub eta_star: f64,
    pub algorithm: Algorithm,
    pub marginal_options: MarginalOptions,
}
