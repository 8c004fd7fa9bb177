//! Model-structure prior, combined unnormalized log posterior mass, and the
//! registry of every model visited during search.
//!
//! A model is identified by the sorted canonical keys of its features joined
//! with `;` (the empty model is `null`). The registry caches one score per
//! key, preserving insertion order for reporting, so the likelihood work for
//! a model is paid exactly once per chain.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;
use thiserror::Error;

use crate::feature::Feature;
use crate::glm::{self, Family, GlmError, MarginalOptions};

/// Separator between feature keys inside a model key. Feature keys use
/// letters, digits and `_.(),:;*+-`, so the pipe can never collide.
pub const MODEL_KEY_SEPARATOR: char = '|';
/// Key of the empty (intercept-only) model.
pub const NULL_MODEL_KEY: &str = "null";

/// Cached score of one model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelScore {
    pub log_marginal: f64,
    pub log_prior: f64,
}

impl ModelScore {
    pub fn log_mass(&self) -> f64 {
        self.log_marginal + self.log_prior
    }
}

/// Canonical model key from feature keys (sorts a copy; the input order does
/// not matter).
pub fn model_key<S: AsRef<str>>(feature_keys: &[S]) -> String {
    if feature_keys.is_empty() {
        return NULL_MODEL_KEY.to_string();
    }
    let mut keys: Vec<&str> = feature_keys.iter().map(|k| k.as_ref()).collect();
    keys.sort_unstable();
    keys.join(&MODEL_KEY_SEPARATOR.to_string())
}

/// Feature keys of a model key (empty for the null model).
pub fn split_model_key(key: &str) -> Vec<&str> {
    if key == NULL_MODEL_KEY || key.is_empty() {
        Vec::new()
    } else {
        key.split(MODEL_KEY_SEPARATOR).collect()
    }
}

/// Log of the structure prior up to its normalizing constant:
/// `ln a · Σ_j c(F_j)`. The constant cancels in every ratio and in the
/// renormalized estimator, so it is never computed.
pub fn log_model_prior(complexities: &[usize], a: f64) -> f64 {
    assert!(a > 0.0 && a < 1.0, "prior base a must lie in (0,1)");
    a.ln() * complexities.iter().map(|c| *c as f64).sum::<f64>()
}

/// Store of every scored model.
#[derive(Clone, Debug, Default)]
pub struct ModelRegistry {
    map: IndexMap<String, ModelScore>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&ModelScore> {
        self.map.get(key)
    }

    pub fn insert(&mut self, key: String, score: ModelScore) {
        self.map.entry(key).or_insert(score);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ModelScore)> {
        self.map.iter()
    }

    /// Log of the total unnormalized mass detected (`ln Σ exp(log_mass)`),
    /// the run statistic used as a merge weight.
    pub fn log_mass_sum(&self) -> f64 {
        log_sum_exp(self.map.values().map(|s| s.log_mass()))
    }

    /// Union with another registry; existing entries win, new ones keep the
    /// other registry's relative order.
    pub fn merge_from(&mut self, other: &ModelRegistry) {
        for (k, v) in other.iter() {
            self.insert(k.clone(), *v);
        }
    }

    /// One tab-separated record per model: key, log marginal, log prior,
    /// log mass, in insertion order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", k, v.log_marginal, v.log_prior, v.log_mass()));
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<ModelRegistry, ScoreError> {
        let mut reg = ModelRegistry::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(ScoreError::MalformedDump { line: lineno + 1 });
            }
            let log_marginal: f64 = fields[1].parse().map_err(|_| ScoreError::MalformedDump { line: lineno + 1 })?;
            let log_prior: f64 = fields[2].parse().map_err(|_| ScoreError::MalformedDump { line: lineno + 1 })?;
            reg.insert(fields[0].to_string(), ModelScore { log_marginal, log_prior });
        }
        Ok(reg)
    }
}

pub fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("model could not be scored: {0}")]
    Unscorable(#[from] GlmError),
    #[error("malformed registry dump at line {line}")]
    MalformedDump { line: usize },
}

/// One population slot: an immutable feature plus its evaluated column on the
/// training matrix.
#[derive(Clone, Debug)]
pub struct PopulationMember {
    pub feature: Arc<Feature>,
    pub column: DVector<f64>,
}

/// Scores model structures against fixed training data, caching in a
/// registry. Unscorable models (singular designs, non-convergence,
/// quasi-separation) are reported as errors and never registered.
pub struct Scorer {
    pub family: Family,
    /// Prior base `a` of the complexity penalty.
    pub prior_a: f64,
    pub marginal_options: MarginalOptions,
    pub registry: ModelRegistry,
    /// Number of actual marginal-likelihood computations (cache misses).
    pub glm_calls: u64,
    y: DVector<f64>,
}

impl Scorer {
    pub fn new(family: Family, prior_a: f64, marginal_options: MarginalOptions, y: DVector<f64>) -> Self {
        assert!(prior_a > 0.0 && prior_a < 1.0);
        Self { family, prior_a, marginal_options, registry: ModelRegistry::new(), glm_calls: 0, y }
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Score the model consisting of the masked members. Cache hits perform no
    /// GLM work.
    pub fn score_mask(&mut self, members: &[PopulationMember], mask: u64) -> Result<ModelScore, ScoreError> {
        let selected: Vec<&PopulationMember> =
            members.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, m)| m).collect();
        let keys: Vec<&str> = selected.iter().map(|m| m.feature.key()).collect();
        let key = model_key(&keys);
        if let Some(score) = self.registry.get(&key) {
            return Ok(*score);
        }
        let complexities: Vec<usize> = selected.iter().map(|m| m.feature.total_width()).collect();
        let columns: Vec<&DVector<f64>> = selected.iter().map(|m| &m.column).collect();
        self.score_new(key, &complexities, &columns)
    }

    /// Score an explicit feature set (used outside populations, e.g. for the
    /// per-covariate preselection and for refits).
    pub fn score_features(&mut self, features: &[(&Arc<Feature>, &DVector<f64>)]) -> Result<ModelScore, ScoreError> {
        let keys: Vec<&str> = features.iter().map(|(f, _)| f.key()).collect();
        let key = model_key(&keys);
        if let Some(score) = self.registry.get(&key) {
            return Ok(*score);
        }
        let complexities: Vec<usize> = features.iter().map(|(f, _)| f.total_width()).collect();
        let columns: Vec<&DVector<f64>> = features.iter().map(|(_, c)| *c).collect();
        self.score_new(key, &complexities, &columns)
    }

    fn score_new(
        &mut self,
        key: String,
        complexities: &[usize],
        columns: &[&DVector<f64>],
    ) -> Result<ModelScore, ScoreError> {
        let n = self.y.len();
        let mut design = DMatrix::from_element(n, columns.len() + 1, 1.0);
        for (j, col) in columns.iter().enumerate() {
            design.column_mut(j + 1).copy_from(*col);
        }
        self.glm_calls += 1;
        let log_marginal = glm::log_marginal_with(self.family, &design, &self.y, self.marginal_options)?;
        let log_prior = log_model_prior(complexities, self.prior_a);
        let score = ModelScore { log_marginal, log_prior };
        self.registry.insert(key, score);
        Ok(score)
    }

    /// Coefficients at the posterior mode for a retained model (plug-in
    /// prediction). Not cached.
    pub fn refit_coefficients(&mut self, columns: &[&DVector<f64>]) -> Result<DVector<f64>, ScoreError> {
        let n = self.y.len();
        let mut design = DMatrix::from_element(n, columns.len() + 1, 1.0);
        for (j, col) in columns.iter().enumerate() {
            design.column_mut(j + 1).copy_from(*col);
        }
        let fit = glm::fit_mle(self.family, &design, &self.y)?;
        Ok(fit.coefficients)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{make_crossover, make_modification, Feature, Transformation};

    fn member(f: Arc<Feature>, x: &DMatrix<f64>) -> PopulationMember {
        let column = crate::feature::evaluate(&f, x).unwrap();
        PopulationMember { feature: f, column }
    }

    fn toy_data(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * (j + 2)) as f64 * 0.37).sin());
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * x[(i, 0)] + 0.2 * ((i as f64) * 0.11).cos());
        (x, y)
    }

    #[test]
    fn prior_is_additive_and_monotone() {
        let a = (-2.0_f64).exp();
        assert!((log_model_prior(&[1], a) - (-2.0)).abs() < 1e-12);
        assert_eq!(log_model_prior(&[], a), 0.0);
        let joint = log_model_prior(&[1, 4], a);
        assert!((joint - (log_model_prior(&[1], a) + log_model_prior(&[4], a))).abs() < 1e-12);
        // adding a feature of complexity c shifts the prior by exactly c·ln a
        let before = log_model_prior(&[2, 3], a);
        let after = log_model_prior(&[2, 3, 5], a);
        assert!((after - before - 5.0 * a.ln()).abs() < 1e-12);
        assert!(after < before);
    }

    #[test]
    fn bic_like_prior_example() {
        let n = 223.0_f64;
        let a = (-2.0 * n.ln()).exp();
        let lp = log_model_prior(&[1, 4], a);
        assert!((lp - (-2.0 * n.ln() * 5.0)).abs() < 1e-9);
    }

    #[test]
    fn model_key_is_order_invariant() {
        assert_eq!(model_key(&["b", "a"]), "a|b");
        assert_eq!(model_key(&["a", "b"]), "a|b");
        assert_eq!(model_key::<&str>(&[]), NULL_MODEL_KEY);
        assert_eq!(split_model_key("a|b"), vec!["a", "b"]);
        assert!(split_model_key(NULL_MODEL_KEY).is_empty());
    }

    #[test]
    fn registry_caches_and_counts_glm_invocations() {
        let (x, y) = toy_data(30);
        let mut scorer = Scorer::new(Family::GaussianIdentity, (-2.0_f64).exp(), MarginalOptions::default(), y);
        let members = vec![member(Feature::leaf(0), &x), member(Feature::leaf(1), &x)];
        let s1 = scorer.score_mask(&members, 0b01).unwrap();
        assert_eq!(scorer.glm_calls, 1);
        for _ in 0..5 {
            let s2 = scorer.score_mask(&members, 0b01).unwrap();
            assert_eq!(s1, s2);
        }
        assert_eq!(scorer.glm_calls, 1, "repeat scoring must hit the cache");
        assert_eq!(scorer.registry.len(), 1);
    }

    #[test]
    fn feature_order_does_not_duplicate_registry_entries() {
        let (x, y) = toy_data(30);
        let mut scorer = Scorer::new(Family::GaussianIdentity, (-2.0_f64).exp(), MarginalOptions::default(), y);
        let a = member(Feature::leaf(0), &x);
        let b = member(Feature::leaf(2), &x);
        let fwd = vec![a.clone(), b.clone()];
        let rev = vec![b, a];
        scorer.score_mask(&fwd, 0b11).unwrap();
        scorer.score_mask(&rev, 0b11).unwrap();
        assert_eq!(scorer.registry.len(), 1);
        assert_eq!(scorer.glm_calls, 1);
    }

    #[test]
    fn true_feature_model_outscores_null_on_simulated_signal() {
        let (x, y) = toy_data(120);
        let n = y.len() as f64;
        let a = (-2.0 * n.ln()).exp();
        let mut scorer = Scorer::new(Family::GaussianIdentity, a, MarginalOptions::default(), y);
        let members = vec![member(Feature::leaf(0), &x)];
        let null = scorer.score_mask(&members, 0).unwrap();
        let with_true = scorer.score_mask(&members, 1).unwrap();
        assert!(with_true.log_mass() > null.log_mass());
    }

    #[test]
    fn unscorable_models_are_not_registered() {
        let (x, y) = toy_data(30);
        let mut scorer = Scorer::new(Family::GaussianIdentity, (-2.0_f64).exp(), MarginalOptions::default(), y);
        let leaf = Feature::leaf(0);
        let dup = vec![member(leaf.clone(), &x), member(leaf, &x)];
        // the same column twice is singular
        assert!(scorer.score_mask(&dup, 0b11).is_err());
        assert_eq!(scorer.registry.len(), 0);
    }

    #[test]
    fn dump_round_trips() {
        let (x, y) = toy_data(25);
        let mut scorer = Scorer::new(Family::GaussianIdentity, (-2.0_f64).exp(), MarginalOptions::default(), y);
        let g = Arc::new(Transformation::by_name("sin").unwrap());
        let f1 = Feature::leaf(0);
        let f2 = make_modification(&Feature::leaf(1), &g, 5, Some(&x)).unwrap();
        let f3 = make_crossover(&f1, &f2, 5, Some(&x)).unwrap();
        let members = vec![member(f1, &x), member(f2, &x), member(f3, &x)];
        for mask in [0u64, 1, 2, 4, 3, 6].iter() {
            let _ = scorer.score_mask(&members, *mask);
        }
        let dump = scorer.registry.dump();
        let parsed = ModelRegistry::parse_dump(&dump).unwrap();
        assert_eq!(parsed.len(), scorer.registry.len());
        assert_eq!(parsed.dump(), dump);
    }
}
