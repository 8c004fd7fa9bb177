//! Posterior summarization, multi-chain merging, model-averaged prediction
//! and the evaluation metrics.
//!
//! Two estimators are available. The renormalized estimator softmaxes the
//! registered log masses over every visited model; it is consistent for both
//! search variants. The frequency estimator uses outer-chain visit counts and
//! is only valid for the reversible variant. Both carry the run's detected
//! mass (log scale), which becomes the merge weight across independent
//! chains.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::feature::{evaluate, Feature};
use crate::glm::{predict_mean, Family};
use crate::scoring::{log_sum_exp, split_model_key, ModelRegistry, Scorer};

/// Posterior estimates from one run (or a merge of runs).
#[derive(Clone, Debug)]
pub struct PosteriorSummary {
    /// Model key -> posterior probability (sums to one).
    pub model_posteriors: IndexMap<String, f64>,
    /// Feature key -> marginal inclusion probability.
    pub inclusion_probs: IndexMap<String, f64>,
    /// ln of the unnormalized mass this run detected (the merge weight).
    pub log_run_mass: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("cannot summarize an empty registry")]
    EmptyRegistry,
    #[error("cannot summarize an empty visit-count table")]
    EmptyCounts,
    #[error("cannot merge an empty list of summaries")]
    NothingToMerge,
    #[error("new data is missing covariate column {0} required by a retained feature")]
    MissingColumn(usize),
}

fn inclusions_from_models(model_posteriors: &IndexMap<String, f64>) -> IndexMap<String, f64> {
    let mut incl: IndexMap<String, f64> = IndexMap::new();
    for (key, p) in model_posteriors {
        for fk in split_model_key(key) {
            *incl.entry(fk.to_string()).or_insert(0.0) += *p;
        }
    }
    incl
}

/// Softmax over the registered log masses (log-sum-exp stabilized).
pub fn renormalized_posteriors(registry: &ModelRegistry) -> Result<PosteriorSummary, InferenceError> {
    if registry.is_empty() {
        return Err(InferenceError::EmptyRegistry);
    }
    let log_total = registry.log_mass_sum();
    let mut model_posteriors = IndexMap::with_capacity(registry.len());
    for (key, score) in registry.iter() {
        model_posteriors.insert(key.clone(), (score.log_mass() - log_total).exp());
    }
    let inclusion_probs = inclusions_from_models(&model_posteriors);
    Ok(PosteriorSummary { model_posteriors, inclusion_probs, log_run_mass: log_total })
}

/// Empirical visit frequencies of an (outer) chain. Only the reversible
/// variant samples the target, so only there are these consistent. The run
/// mass for merge weighting is passed in from the run's registry.
pub fn frequency_posteriors(
    visit_counts: &IndexMap<String, u64>,
    log_run_mass: f64,
) -> Result<PosteriorSummary, InferenceError> {
    let total: u64 = visit_counts.values().sum();
    if total == 0 {
        return Err(InferenceError::EmptyCounts);
    }
    let mut model_posteriors = IndexMap::with_capacity(visit_counts.len());
    for (key, count) in visit_counts {
        model_posteriors.insert(key.clone(), *count as f64 / total as f64);
    }
    let inclusion_probs = inclusions_from_models(&model_posteriors);
    Ok(PosteriorSummary { model_posteriors, inclusion_probs, log_run_mass })
}

/// Weighted merge across runs: weights proportional to each run's detected
/// mass, statistics combined as convex sums.
pub fn merge_runs(summaries: &[PosteriorSummary]) -> Result<PosteriorSummary, InferenceError> {
    if summaries.is_empty() {
        return Err(InferenceError::NothingToMerge);
    }
    if summaries.len() == 1 {
        return Ok(summaries[0].clone());
    }
    let log_total = log_sum_exp(summaries.iter().map(|s| s.log_run_mass));
    let weights: Vec<f64> = summaries.iter().map(|s| (s.log_run_mass - log_total).exp()).collect();
    let mut model_posteriors: IndexMap<String, f64> = IndexMap::new();
    let mut inclusion_probs: IndexMap<String, f64> = IndexMap::new();
    for (summary, w) in summaries.iter().zip(&weights) {
        for (k, p) in &summary.model_posteriors {
            *model_posteriors.entry(k.clone()).or_insert(0.0) += w * p;
        }
        for (k, p) in &summary.inclusion_probs {
            *inclusion_probs.entry(k.clone()).or_insert(0.0) += w * p;
        }
    }
    Ok(PosteriorSummary { model_posteriors, inclusion_probs, log_run_mass: log_total })
}

/// A retained model: its renormalized posterior weight and plug-in
/// coefficients (intercept first, then one per feature in `features` order,
/// which follows the model key's sorted feature order).
#[derive(Clone, Debug)]
pub struct ModelFit {
    pub key: String,
    pub posterior: f64,
    pub features: Vec<Arc<Feature>>,
    pub coefficients: DVector<f64>,
}

impl ModelFit {
    pub fn from_parts(key: String, posterior: f64, features: Vec<Arc<Feature>>, coefficients: Vec<f64>) -> Self {
        Self { key, posterior, features, coefficients: DVector::from_vec(coefficients) }
    }
}

/// Posterior mass below which models are dropped from prediction; the
/// remainder is renormalized.
pub const PREDICTION_MASS_FLOOR: f64 = 1e-6;

/// Refit coefficients for every model above the mass floor. `features` must
/// resolve every feature key appearing in those models.
pub fn retained_model_fits(
    summary: &PosteriorSummary,
    features: &IndexMap<String, Arc<Feature>>,
    scorer: &mut Scorer,
    x_train: &DMatrix<f64>,
) -> Vec<ModelFit> {
    let mut fits = Vec::new();
    let mut kept_mass = 0.0;
    for (key, p) in &summary.model_posteriors {
        if *p < PREDICTION_MASS_FLOOR {
            continue;
        }
        let feats: Option<Vec<Arc<Feature>>> =
            split_model_key(key).iter().map(|fk| features.get(*fk).cloned()).collect();
        let Some(feats) = feats else { continue };
        let columns: Result<Vec<DVector<f64>>, _> = feats.iter().map(|f| evaluate(f, x_train)).collect();
        let Ok(columns) = columns else { continue };
        let col_refs: Vec<&DVector<f64>> = columns.iter().collect();
        let Ok(coefficients) = scorer.refit_coefficients(&col_refs) else { continue };
        kept_mass += *p;
        fits.push(ModelFit { key: key.clone(), posterior: *p, features: feats, coefficients });
    }
    if kept_mass > 0.0 {
        for fit in &mut fits {
            fit.posterior /= kept_mass;
        }
    }
    fits
}

/// Model-averaged predictions for new rows. Scores are probabilities for the
/// Bernoulli family and means for the Gaussian one; labels thresholded at
/// `eta` accompany Bernoulli scores.
pub struct Predictions {
    pub scores: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

pub fn model_average_predict(
    fits: &[ModelFit],
    x_new: &DMatrix<f64>,
    family: Family,
    eta: f64,
) -> Result<Predictions, InferenceError> {
    let n = x_new.nrows();
    // evaluate each distinct feature once
    let mut columns: HashMap<&str, DVector<f64>> = HashMap::new();
    for fit in fits {
        for f in &fit.features {
            if !columns.contains_key(f.key()) {
                let mut leaves = Vec::new();
                f.leaf_indices(&mut leaves);
                if let Some(bad) = leaves.iter().find(|j| **j >= x_new.ncols()) {
                    return Err(InferenceError::MissingColumn(*bad));
                }
                let col = evaluate(f, x_new).map_err(|_| InferenceError::MissingColumn(usize::MAX))?;
                columns.insert(f.key(), col);
            }
        }
    }
    let mut scores = vec![0.0; n];
    for fit in fits {
        let cols: Vec<&DVector<f64>> = fit.features.iter().map(|f| &columns[f.key()]).collect();
        let mut row = DVector::zeros(fit.features.len() + 1);
        for i in 0..n {
            row[0] = 1.0;
            for (j, col) in cols.iter().enumerate() {
                row[j + 1] = col[i];
            }
            scores[i] += fit.posterior * predict_mean(family, &fit.coefficients, &row);
        }
    }
    let labels = match family {
        Family::BernoulliLogit => Some(scores.iter().map(|s| u8::from(*s >= eta)).collect()),
        Family::GaussianIdentity => None,
    };
    Ok(Predictions { scores, labels })
}

/// Accuracy, false positive rate and false negative rate. A rate whose
/// denominator class is absent is reported as `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
}

pub fn classification_metrics(y_hat: &[u8], y_true: &[u8]) -> ClassificationMetrics {
    assert_eq!(y_hat.len(), y_true.len());
    assert!(!y_hat.is_empty());
    let n = y_true.len() as f64;
    let mut correct = 0usize;
    let mut fp = 0usize;
    let mut fnc = 0usize;
    let mut positives = 0usize;
    let mut negatives = 0usize;
    for (h, t) in y_hat.iter().zip(y_true) {
        if h == t {
            correct += 1;
        }
        match (t, h) {
            (0, 1) => fp += 1,
            (1, 0) => fnc += 1,
            _ => {}
        }
        if *t == 1 {
            positives += 1;
        } else {
            negatives += 1;
        }
    }
    ClassificationMetrics {
        acc: correct as f64 / n,
        fpr: (negatives > 0).then(|| fp as f64 / negatives as f64),
        fnr: (positives > 0).then(|| fnc as f64 / positives as f64),
    }
}

/// Replication-averaged detection quality. Each truth group lists equivalent
/// identities for one true feature; detecting any member counts as detecting
/// the group, and detected features belonging to no group are false
/// positives. A run that detects nothing contributes zero to the FDR
/// average.
#[derive(Clone, Debug)]
pub struct DiscoveryMetrics {
    pub per_group_power: Vec<f64>,
    pub power: f64,
    pub fp: f64,
    pub fdr: f64,
}

pub fn discovery_metrics(
    runs: &[Vec<String>],
    truth_groups: &[Vec<String>],
) -> Result<DiscoveryMetrics, InferenceError> {
    if runs.is_empty() {
        return Err(InferenceError::NothingToMerge);
    }
    let n = runs.len() as f64;
    let mut group_hits = vec![0.0; truth_groups.len()];
    let mut fp_total = 0.0;
    let mut fdr_total = 0.0;
    for detected in runs {
        for (gi, group) in truth_groups.iter().enumerate() {
            if detected.iter().any(|d| group.contains(d)) {
                group_hits[gi] += 1.0;
            }
        }
        let fp_run = detected.iter().filter(|d| !truth_groups.iter().any(|g| g.contains(d))).count() as f64;
        fp_total += fp_run;
        if !detected.is_empty() {
            fdr_total += fp_run / detected.len() as f64;
        }
    }
    let per_group_power: Vec<f64> = group_hits.iter().map(|h| h / n).collect();
    let power = if per_group_power.is_empty() {
        0.0
    } else {
        per_group_power.iter().sum::<f64>() / per_group_power.len() as f64
    };
    Ok(DiscoveryMetrics { per_group_power, power, fp: fp_total / n, fdr: fdr_total / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{ModelScore, NULL_MODEL_KEY};

    fn registry_of(entries: &[(&str, f64)]) -> ModelRegistry {
        let mut reg = ModelRegistry::new();
        for (k, lm) in entries {
            reg.insert(k.to_string(), ModelScore { log_marginal: *lm, log_prior: 0.0 });
        }
        reg
    }

    #[test]
    fn equal_mass_models_split_evenly() {
        let reg = registry_of(&[("x1", -5.0), ("x2", -5.0)]);
        let summary = renormalized_posteriors(&reg).unwrap();
        assert!((summary.model_posteriors["x1"] - 0.5).abs() < 1e-12);
        assert!((summary.model_posteriors["x2"] - 0.5).abs() < 1e-12);
        // a feature in exactly one of two equal-mass models has inclusion 1/2
        assert!((summary.inclusion_probs["x1"] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn renormalized_is_shift_invariant() {
        let reg1 = registry_of(&[("x1", -3.0), ("x1|x2", -4.0), (NULL_MODEL_KEY, -6.0)]);
        let reg2 = registry_of(&[("x1", 97.0), ("x1|x2", 96.0), (NULL_MODEL_KEY, 94.0)]);
        let s1 = renormalized_posteriors(&reg1).unwrap();
        let s2 = renormalized_posteriors(&reg2).unwrap();
        for (k, p) in &s1.model_posteriors {
            assert!((p - s2.model_posteriors[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn posteriors_sum_to_one_and_match_expected_size() {
        let reg = registry_of(&[("x1", -1.0), ("x1|x2", -2.0), ("x2", -0.5), (NULL_MODEL_KEY, -3.0)]);
        let s = renormalized_posteriors(&reg).unwrap();
        let total: f64 = s.model_posteriors.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // sum of inclusions equals the posterior-expected model size
        let incl_sum: f64 = s.inclusion_probs.values().sum();
        let expected_size: f64 =
            s.model_posteriors.iter().map(|(k, p)| split_model_key(k).len() as f64 * p).sum();
        assert!((incl_sum - expected_size).abs() < 1e-10);
    }

    #[test]
    fn empty_registry_is_an_error() {
        assert_eq!(renormalized_posteriors(&ModelRegistry::new()).unwrap_err(), InferenceError::EmptyRegistry);
    }

    #[test]
    fn frequency_posterior_basics() {
        let mut counts = IndexMap::new();
        counts.insert("x1".to_string(), 75u64);
        counts.insert("x2".to_string(), 25u64);
        let s = frequency_posteriors(&counts, 0.0).unwrap();
        assert!((s.model_posteriors["x1"] - 0.75).abs() < 1e-12);
        assert!((s.model_posteriors["x2"] - 0.25).abs() < 1e-12);

        let mut point = IndexMap::new();
        point.insert("x3".to_string(), 10u64);
        let s = frequency_posteriors(&point, 0.0).unwrap();
        assert!((s.model_posteriors["x3"] - 1.0).abs() < 1e-12);

        assert_eq!(frequency_posteriors(&IndexMap::new(), 0.0).unwrap_err(), InferenceError::EmptyCounts);
    }

    #[test]
    fn merge_weights_follow_detected_mass() {
        let reg_big = registry_of(&[("x1", 0.0)]);
        let reg_small = registry_of(&[("x2", -10.0)]);
        let a = renormalized_posteriors(&reg_big).unwrap();
        let b = renormalized_posteriors(&reg_small).unwrap();
        let merged = merge_runs(&[a.clone(), b.clone()]).unwrap();
        // the run with more mass dominates
        assert!(merged.model_posteriors["x1"] > 0.99);
        let total: f64 = merged.model_posteriors.values().sum();
        assert!((total - 1.0).abs() < 1e-12);

        // equal masses average evenly
        let c = renormalized_posteriors(&registry_of(&[("x1", -2.0)])).unwrap();
        let d = renormalized_posteriors(&registry_of(&[("x2", -2.0)])).unwrap();
        let even = merge_runs(&[c, d]).unwrap();
        assert!((even.model_posteriors["x1"] - 0.5).abs() < 1e-12);
        assert!((even.model_posteriors["x2"] - 0.5).abs() < 1e-12);

        // single-run merge returns the input unchanged
        let alone = merge_runs(&[a.clone()]).unwrap();
        assert_eq!(alone.model_posteriors, a.model_posteriors);

        // merging identical summaries is idempotent
        let twice = merge_runs(&[b.clone(), b.clone()]).unwrap();
        for (k, p) in &b.model_posteriors {
            assert!((twice.model_posteriors[k] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_metric_cases() {
        let m = classification_metrics(&[1, 0, 1], &[1, 1, 1]);
        assert!((m.acc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.fpr, None, "no negatives present");
        assert!((m.fnr.unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let perfect = classification_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]);
        assert_eq!(perfect.acc, 1.0);
        assert_eq!(perfect.fpr, Some(0.0));
        assert_eq!(perfect.fnr, Some(0.0));
    }

    #[test]
    fn discovery_metric_cases() {
        let truth = vec![vec!["t".to_string()]];
        // every run detects exactly the true feature
        let runs = vec![vec!["t".to_string()], vec!["t".to_string()]];
        let m = discovery_metrics(&runs, &truth).unwrap();
        assert_eq!((m.power, m.fp, m.fdr), (1.0, 0.0, 0.0));

        // no detections at all: the empty-detection convention
        let runs: Vec<Vec<String>> = vec![vec![], vec![]];
        let m = discovery_metrics(&runs, &truth).unwrap();
        assert_eq!((m.power, m.fp, m.fdr), (0.0, 0.0, 0.0));

        // equivalent alternates all count as the true positive
        let truth = vec![vec!["t1".to_string(), "t2".to_string()]];
        let runs = vec![vec!["t2".to_string(), "junk".to_string()], vec!["t1".to_string()]];
        let m = discovery_metrics(&runs, &truth).unwrap();
        assert!((m.power - 1.0).abs() < 1e-12);
        assert!((m.fp - 0.5).abs() < 1e-12);
        assert!((m.fdr - 0.25).abs() < 1e-12);
    }
}
