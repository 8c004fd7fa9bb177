//! Population lifecycle and the two outer search loops.
//!
//! GMJMCMC runs the mode-jumping kernel inside a sequence of feature
//! populations. After each exploration segment, low-inclusion members are
//! filtered out and replaced by freshly generated features (mutation,
//! modification, crossover, projection). The visited-model registry
//! accumulates across populations and feeds the renormalized posterior
//! estimator.
//!
//! The reversible variant (RGMJMCMC) instead proposes a whole population swap
//! around the current model, runs a short local chain inside it, randomizes,
//! and accepts with a two-stage rule: the posterior ratio first (cheap), and
//! only if that passes is the backward population and search generated for the
//! randomization-density ratio. Frequency estimates over its outer states are
//! then valid alongside the renormalized ones.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::feature::{
    evaluate, extend_basis, make_crossover, make_modification, make_projection, orthonormal_basis, Feature,
    FeatureNode, TransformationSet,
};
use crate::glm::{self, Family, MarginalOptions};
use crate::mjmcmc::{
    mjmcmc_step, run_segment, ChainState, Mask, MjmcmcConfig, Population, SegmentStats,
    MAX_POPULATION_SIZE,
};
use crate::scoring::{model_key, ModelRegistry, ModelScore, PopulationMember, Scorer};

pub use crate::mjmcmc::Population as SearchSpace;

/// Configuration of the population search. `validate` enforces the structural
/// constraints (probabilities summing to one, `s >= Q`, population capacity).
#[derive(Clone, Debug)]
pub struct GmjmcmcConfig {
    /// Population size (each population spans a 2^s model space).
    pub s: usize,
    /// Number of populations (the last one gets the final segment).
    pub t_max: usize,
    pub n_init: usize,
    pub n_expl: usize,
    pub n_final: usize,
    /// Keep extending the final segment until the registry holds this many
    /// unique models (bounded by 50x n_final extra steps).
    pub final_unique_models: Option<usize>,
    pub p_mutation: f64,
    pub p_modification: f64,
    pub p_crossover: f64,
    pub p_projection: f64,
    /// Probability of actually deleting a below-threshold member.
    pub p_del: f64,
    pub filtration_threshold: f64,
    /// Covariate indices that are never filtered out of a population.
    pub keep_always: Vec<usize>,
    pub d_max: usize,
    /// Maximum number of features in a model (the prior's support cap).
    pub q: usize,
    pub adaptive: bool,
    pub adapt_epsilon: f64,
    pub mjmcmc: MjmcmcConfig,
    /// Per-feature swap probability of the reversible kernel's randomization.
    pub rho_r: f64,
    /// Local chain length inside one reversible step.
    pub rgm_local_steps: usize,
    /// Outer reversible steps (each is one population swap proposal).
    pub rgm_outer_steps: usize,
    /// Projection fan-in is drawn uniformly from {2, ..., this}.
    pub max_projection_children: usize,
    /// Redraw attempts before the mutation fallback.
    pub transition_retries: usize,
    /// Let the mutation pool grow with previously seen features.
    pub grow_f0: bool,
}

impl GmjmcmcConfig {
    /// Defaults for a problem with `m` covariates: `s = max(Q+2, min(2m, 50))`
    /// capped at the population limit, with jump sizes scaled to `s`.
    pub fn for_problem(m: usize, q: usize, d_max: usize) -> Self {
        let mut s = (q + 2).max((2 * m).min(50));
        if d_max == 0 {
            // only raw covariates exist, so the population cannot exceed m
            s = s.min(m);
        }
        s = s.min(MAX_POPULATION_SIZE);
        let jump_max = ((s as f64 * 0.35).round() as usize).max(2).min(s);
        let jump_min = ((s as f64 * 0.15).round() as usize).max(1).min(jump_max);
        GmjmcmcConfig {
            s,
            t_max: 20,
            n_init: 500,
            n_expl: 250,
            n_final: 1000,
            final_unique_models: None,
            p_mutation: 0.1,
            p_modification: 0.3,
            p_crossover: 0.3,
            p_projection: 0.3,
            p_del: 1.0,
            filtration_threshold: 0.1,
            keep_always: Vec::new(),
            d_max,
            q: q.min(s),
            adaptive: true,
            adapt_epsilon: 0.01,
            mjmcmc: MjmcmcConfig {
                prob_large_jump: 0.05,
                jump_size_min: jump_min,
                jump_size_max: jump_max,
                local_opt_steps: 2,
                randomize_prob: 0.1,
                max_model_size: q.min(s),
            },
            rho_r: 0.02,
            rgm_local_steps: 10,
            rgm_outer_steps: 500,
            max_projection_children: 5,
            transition_retries: 20,
            grow_f0: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.s < 1 || self.s > MAX_POPULATION_SIZE {
            return Err(format!("population size s={} outside 1..={}", self.s, MAX_POPULATION_SIZE));
        }
        if self.s < self.q {
            return Err(format!("population size s={} must be at least Q={}", self.s, self.q));
        }
        let psum = self.p_mutation + self.p_modification + self.p_crossover + self.p_projection;
        if (psum - 1.0).abs() > 1e-9 {
            return Err(format!("operator probabilities must sum to 1 (got {psum})"));
        }
        for (name, p) in [
            ("p_mutation", self.p_mutation),
            ("p_modification", self.p_modification),
            ("p_crossover", self.p_crossover),
            ("p_projection", self.p_projection),
            ("p_del", self.p_del),
            ("filtration_threshold", self.filtration_threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0,1]"));
            }
        }
        if !(self.rho_r > 0.0 && self.rho_r < 0.5) {
            return Err("rho_r must lie in (0, 0.5)".into());
        }
        if self.t_max == 0 {
            return Err("t_max must be at least 1".into());
        }
        if self.max_projection_children < 2 {
            return Err("max_projection_children must be at least 2".into());
        }
        self.mjmcmc.validate(self.s)?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no covariate could be scored against the response")]
    NoViableCovariates,
}

/// Running marginal-inclusion estimates used to bias operand selection.
/// Estimates are truncated away from 0 and 1, and unseen features start at
/// one half; updates shrink like 1/k, so adaptation diminishes.
#[derive(Clone, Debug)]
pub struct AdaptiveState {
    enabled: bool,
    epsilon: f64,
    included: HashMap<String, f64>,
    present: HashMap<String, f64>,
}

impl AdaptiveState {
    pub fn new(enabled: bool, epsilon: f64) -> Self {
        Self { enabled, epsilon, included: HashMap::new(), present: HashMap::new() }
    }

    /// Fold one finished segment into the running estimates: every population
    /// member was "present" for `steps` states with the given inclusion share.
    pub fn record_segment(&mut self, pop: &Population, inclusion: &[f64], steps: f64) {
        for (j, member) in pop.members.iter().enumerate() {
            let key = member.feature.key();
            *self.present.entry(key.to_string()).or_insert(0.0) += steps;
            *self.included.entry(key.to_string()).or_insert(0.0) += inclusion[j] * steps;
        }
    }

    /// Fold a single chain state (used by the reversible outer loop).
    pub fn record_state(&mut self, pop: &Population, current: Mask) {
        for (j, member) in pop.members.iter().enumerate() {
            let key = member.feature.key();
            *self.present.entry(key.to_string()).or_insert(0.0) += 1.0;
            if current >> j & 1 == 1 {
                *self.included.entry(key.to_string()).or_insert(0.0) += 1.0;
            }
        }
    }

    /// Truncated inclusion estimate for one feature.
    pub fn estimate(&self, key: &str) -> f64 {
        let present = self.present.get(key).copied().unwrap_or(0.0);
        if present == 0.0 {
            return 0.5;
        }
        let incl = self.included.get(key).copied().unwrap_or(0.0) / present;
        incl.clamp(self.epsilon, 1.0 - self.epsilon)
    }

    /// Operand weight for the unary operators (modification, mutation): an
    /// even blend of uniform and estimate-proportional mass, so raw material
    /// whose value only shows after transformation keeps real proposal mass.
    pub fn weight_explore(&self, key: &str) -> f64 {
        if self.enabled {
            0.5 + 0.5 * self.estimate(key)
        } else {
            1.0
        }
    }

    /// Operand weight for the binary/combining operators (crossover,
    /// projection children): mostly estimate-proportional, concentrating the
    /// pairing on features that already earned inclusion mass.
    pub fn weight_exploit(&self, key: &str) -> f64 {
        if self.enabled {
            0.15 + 0.85 * self.estimate(key)
        } else {
            1.0
        }
    }
}

fn weighted_choice(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.gen_range(0..weights.len());
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Shared, read-only context of one run.
pub struct SearchContext<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub family: Family,
    pub gset: &'a TransformationSet,
    /// The depth-zero pool: one leaf per covariate (optionally grown).
    pub f0: Vec<PopulationMember>,
}

impl<'a> SearchContext<'a> {
    pub fn new(x: &'a DMatrix<f64>, y: &'a DVector<f64>, family: Family, gset: &'a TransformationSet) -> Self {
        let f0 = (0..x.ncols())
            .map(|j| PopulationMember { feature: Feature::leaf(j), column: x.column(j).into_owned() })
            .collect();
        Self { x, y, family, gset, f0 }
    }
}

/// Filtration: members with inclusion below the threshold are deleted with
/// probability `p_del`; protected covariates are always kept. Returns the
/// keep flags and the number removed.
pub fn filtrate(
    pop: &Population,
    inclusion: &[f64],
    cfg: &GmjmcmcConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<bool>, usize) {
    let mut keep = vec![true; pop.size()];
    let mut removed = 0;
    for (j, member) in pop.members.iter().enumerate() {
        if inclusion[j] >= cfg.filtration_threshold {
            continue;
        }
        let protected = match member.feature.node() {
            FeatureNode::Leaf(i) => cfg.keep_always.contains(i),
            _ => false,
        };
        if protected {
            continue;
        }
        if rng.gen_bool(cfg.p_del) {
            keep[j] = false;
            removed += 1;
        }
    }
    (keep, removed)
}

enum Operator {
    Mutation,
    Modification,
    Crossover,
    Projection,
}

fn draw_operator(cfg: &GmjmcmcConfig, rng: &mut ChaCha8Rng) -> Operator {
    let u: f64 = rng.gen();
    if u < cfg.p_mutation {
        Operator::Mutation
    } else if u < cfg.p_mutation + cfg.p_modification {
        Operator::Modification
    } else if u < cfg.p_mutation + cfg.p_modification + cfg.p_crossover {
        Operator::Crossover
    } else {
        Operator::Projection
    }
}

/// Pick one entry from a pool of members by the given weight function.
fn pick_weighted<'p>(
    pool: &[&'p PopulationMember],
    weight_of: impl Fn(&str) -> f64,
    rng: &mut ChaCha8Rng,
) -> &'p PopulationMember {
    let weights: Vec<f64> = pool.iter().map(|m| weight_of(m.feature.key())).collect();
    pool[weighted_choice(&weights, rng)]
}

/// Pick `k` distinct entries (sequential weighted draws without replacement).
fn pick_weighted_distinct<'p>(
    pool: &[&'p PopulationMember],
    k: usize,
    weight_of: impl Fn(&str) -> f64,
    rng: &mut ChaCha8Rng,
) -> Vec<&'p PopulationMember> {
    let mut weights: Vec<f64> = pool.iter().map(|m| weight_of(m.feature.key())).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let i = weighted_choice(&weights, rng);
        picked.push(pool[i]);
        weights[i] = 0.0;
    }
    picked
}

/// Fill `n_new` population slots with freshly generated features. Survivors
/// are retained verbatim at the front. Redundant candidates (duplicate key or
/// linear dependence on the forming population) are redrawn; after the retry
/// budget the slot falls back to mutation and finally to a deterministic
/// sweep of unused covariates.
pub fn transition(
    survivors: Vec<PopulationMember>,
    n_new: usize,
    ctx: &SearchContext,
    grown: &[PopulationMember],
    cfg: &GmjmcmcConfig,
    adaptive: &AdaptiveState,
    rng: &mut ChaCha8Rng,
) -> Vec<PopulationMember> {
    let n = ctx.x.nrows();
    let mut members = survivors;
    let mut keys: HashSet<String> = members.iter().map(|m| m.feature.key().to_string()).collect();
    let col_refs: Vec<&DVector<f64>> = members.iter().map(|m| &m.column).collect();
    let mut basis = orthonormal_basis(n, &col_refs);

    for _ in 0..n_new {
        let mut accepted: Option<PopulationMember> = None;
        let try_candidate =
            |f: Arc<Feature>, keys: &mut HashSet<String>, basis: &mut Vec<DVector<f64>>| -> Option<PopulationMember> {
                if keys.contains(f.key()) {
                    return None;
                }
                let column = evaluate(&f, ctx.x).ok()?;
                if !extend_basis(basis, &column) {
                    return None;
                }
                keys.insert(f.key().to_string());
                Some(PopulationMember { feature: f, column })
            };

        for attempt in 0..cfg.transition_retries * 2 {
            // after the retry budget, fall back to pure mutation draws
            let op = if attempt < cfg.transition_retries { draw_operator(cfg, rng) } else { Operator::Mutation };
            let candidate: Option<Arc<Feature>> = {
                // grown features re-enter through mutation only; modification
                // and crossover operands stay focused on the live population
                let pool: Vec<&PopulationMember> = members.iter().chain(ctx.f0.iter()).collect();
                match op {
                    Operator::Mutation => {
                        // the depth-zero pool, optionally grown with
                        // previously seen features
                        let f0: Vec<&PopulationMember> = ctx.f0.iter().chain(grown.iter()).collect();
                        Some(Arc::clone(&pick_weighted(&f0, |k| adaptive.weight_explore(k), rng).feature))
                    }
                    Operator::Modification => {
                        let operand = pick_weighted(&pool, |k| adaptive.weight_explore(k), rng);
                        let g = &ctx.gset.entries()[rng.gen_range(0..ctx.gset.len())];
                        make_modification(&operand.feature, g, cfg.d_max, Some(ctx.x)).ok()
                    }
                    Operator::Crossover => {
                        let a = pick_weighted(&pool, |k| adaptive.weight_exploit(k), rng);
                        let b = pick_weighted(&pool, |k| adaptive.weight_exploit(k), rng);
                        make_crossover(&a.feature, &b.feature, cfg.d_max, Some(ctx.x)).ok()
                    }
                    Operator::Projection => {
                        // children come from the forming population; fall back
                        // to raw covariates while it is still too small
                        let proj_pool: Vec<&PopulationMember> =
                            if members.len() >= 2 { members.iter().collect() } else { ctx.f0.iter().collect() };
                        if proj_pool.len() < 2 {
                            None
                        } else {
                            let kmax = cfg.max_projection_children.min(proj_pool.len());
                            let k = rng.gen_range(2..=kmax);
                            let children = pick_weighted_distinct(&proj_pool, k, |key| adaptive.weight_exploit(key), rng);
                            let mut values = DMatrix::zeros(n, k);
                            for (j, c) in children.iter().enumerate() {
                                values.column_mut(j).copy_from(&c.column);
                            }
                            match glm::fit_projection_weights(&values, ctx.y, ctx.family) {
                                Err(_) => None,
                                Ok((intercept, weights)) => {
                                    let child_feats: Vec<Arc<Feature>> =
                                        children.iter().map(|c| Arc::clone(&c.feature)).collect();
                                    let g = &ctx.gset.entries()[rng.gen_range(0..ctx.gset.len())];
                                    make_projection(&child_feats, &weights, intercept, g, cfg.d_max, Some(ctx.x))
                                        .ok()
                                }
                            }
                        }
                    }
                }
            };
            if let Some(f) = candidate {
                if let Some(m) = try_candidate(f, &mut keys, &mut basis) {
                    accepted = Some(m);
                    break;
                }
            }
        }
        if accepted.is_none() {
            // deterministic sweep: first unused, independent covariate
            for m in &ctx.f0 {
                if let Some(cand) = try_candidate(Arc::clone(&m.feature), &mut keys, &mut basis) {
                    accepted = Some(cand);
                    break;
                }
            }
        }
        if let Some(m) = accepted {
            members.push(m);
        }
    }
    members
}

/// Per-generation trace record.
#[derive(Clone, Debug)]
pub struct GenerationRecord {
    pub generation: usize,
    pub population_keys: Vec<String>,
    pub acceptance_rate: f64,
    pub best_log_mass: f64,
    pub registry_size: usize,
}

/// Counters specific to the reversible kernel.
#[derive(Clone, Copy, Debug, Default)]
pub struct RgmCounters {
    pub outer_steps: u64,
    pub stage1_attempts: u64,
    pub stage1_passes: u64,
    pub backward_runs: u64,
    pub zero_backward_rejections: u64,
    pub accepted: u64,
}

/// Everything a finished chain hands back.
pub struct RunOutput {
    pub registry: ModelRegistry,
    pub visit_counts: IndexMap<String, u64>,
    pub trace: Vec<GenerationRecord>,
    /// Every feature that ever entered a population, keyed canonically.
    pub features: IndexMap<String, Arc<Feature>>,
    pub best_key: String,
    pub best_log_mass: f64,
    pub glm_calls: u64,
    pub wall_ms: u128,
    pub final_population: Vec<String>,
    pub rgm_counters: Option<RgmCounters>,
}

/// Cap on the optional grown mutation pool.
const GROWN_POOL_CAP: usize = 150;

/// Append population members that are not raw covariates to the grown pool
/// (deduplicated, oldest dropped at the cap).
fn grow_pool(grown: &mut Vec<PopulationMember>, pop: &Population) {
    for m in &pop.members {
        if matches!(m.feature.node(), FeatureNode::Leaf(_)) {
            continue;
        }
        if grown.iter().any(|g| g.feature.key() == m.feature.key()) {
            continue;
        }
        grown.push(m.clone());
    }
    if grown.len() > GROWN_POOL_CAP {
        let excess = grown.len() - GROWN_POOL_CAP;
        grown.drain(0..excess);
    }
}

fn clamp_mjcfg(cfg: &MjmcmcConfig, s: usize) -> MjmcmcConfig {
    let mut c = cfg.clone();
    c.jump_size_max = c.jump_size_max.min(s);
    c.jump_size_min = c.jump_size_min.min(c.jump_size_max);
    c
}

struct InitOutcome {
    population: Population,
    state: ChainState,
}

/// Score the per-covariate single-feature models, keep the viable ones (top
/// `s` when there are more), run the init segment on that depth-zero space,
/// and seed the first working population from its highest-frequency members.
fn init_population(
    ctx: &SearchContext,
    cfg: &GmjmcmcConfig,
    adaptive: &mut AdaptiveState,
    scorer: &mut Scorer,
    rng: &mut ChaCha8Rng,
    features: &mut IndexMap<String, Arc<Feature>>,
) -> Result<InitOutcome, RunError> {
    let null_score = scorer.score_features(&[]).ok();
    let mut viable: Vec<(usize, f64)> = Vec::new();
    for (j, member) in ctx.f0.iter().enumerate() {
        if let Ok(score) = scorer.score_features(&[(&member.feature, &member.column)]) {
            viable.push((j, score.log_mass()));
        }
    }
    if viable.is_empty() {
        return Err(RunError::NoViableCovariates);
    }
    viable.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    viable.truncate(cfg.s);
    let mut s0_indices: Vec<usize> = viable.iter().map(|(j, _)| *j).collect();
    s0_indices.sort_unstable();

    let members: Vec<PopulationMember> = s0_indices.iter().map(|j| ctx.f0[*j].clone()).collect();
    let pop0 = Population { members, generation: 0 };
    for m in &pop0.members {
        features.entry(m.feature.key().to_string()).or_insert_with(|| Arc::clone(&m.feature));
    }

    // start from the null model when it scores, else from the best single
    let (start_mask, start_score) = match null_score {
        Some(score) => (0u64, score),
        None => {
            let best_j = viable[0].0;
            let pos = s0_indices.iter().position(|j| *j == best_j).unwrap();
            let m = &pop0.members[pos];
            let score = scorer
                .score_features(&[(&m.feature, &m.column)])
                .expect("single-feature model scored during preselection");
            (1u64 << pos, score)
        }
    };
    let mut state = ChainState::new(start_mask, start_score);

    let mjcfg = clamp_mjcfg(&cfg.mjmcmc, pop0.size());
    let mut seg = SegmentStats::default();
    for _ in 0..cfg.n_init {
        mjmcmc_step(&mut state, &pop0, &mjcfg, scorer, rng, &mut seg);
    }
    let inclusion = seg.inclusion_estimates(pop0.size());
    adaptive.record_segment(&pop0, &inclusion, cfg.n_init as f64);

    // the s1 highest-frequency components seed the first population
    let s1 = pop0.size().min((cfg.s - (cfg.s / 4).max(1)).max(1));
    let mut ranked: Vec<usize> = (0..pop0.size()).collect();
    ranked.sort_by(|a, b| inclusion[*b].partial_cmp(&inclusion[*a]).unwrap().then(a.cmp(b)));
    ranked.truncate(s1);
    ranked.sort_unstable();
    let current_keys: HashSet<String> = pop0
        .members
        .iter()
        .enumerate()
        .filter(|(j, _)| state.current >> j & 1 == 1)
        .map(|(_, m)| m.feature.key().to_string())
        .collect();

    let seeds: Vec<PopulationMember> = ranked.iter().map(|j| pop0.members[*j].clone()).collect();
    let n_new = cfg.s.saturating_sub(seeds.len());
    let members = transition(seeds, n_new, ctx, &[], cfg, adaptive, rng);
    let population = Population { members, generation: 1 };
    for m in &population.members {
        features.entry(m.feature.key().to_string()).or_insert_with(|| Arc::clone(&m.feature));
    }

    // carry the chain into the new population (dropped features fall away)
    let carried: Vec<&str> = population
        .members
        .iter()
        .filter(|m| current_keys.contains(m.feature.key()))
        .map(|m| m.feature.key())
        .collect();
    let mask = population.mask_of_keys(&carried).unwrap_or(0);
    let score = scorer.score_mask(&population.members, mask).unwrap_or(start_score);
    let mut new_state = ChainState::new(mask, score);
    new_state.visit_counts = state.visit_counts;
    Ok(InitOutcome { population, state: new_state })
}

/// One full GMJMCMC run (a single chain).
pub fn run_gmjmcmc(
    ctx: &SearchContext,
    cfg: &GmjmcmcConfig,
    prior_a: f64,
    marginal_options: MarginalOptions,
    seed: u64,
) -> Result<RunOutput, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scorer = Scorer::new(ctx.family, prior_a, marginal_options, ctx.y.clone());
    let mut adaptive = AdaptiveState::new(cfg.adaptive, cfg.adapt_epsilon);
    let mut features: IndexMap<String, Arc<Feature>> = IndexMap::new();
    let mut trace = Vec::new();

    let InitOutcome { mut population, mut state } =
        init_population(ctx, cfg, &mut adaptive, &mut scorer, &mut rng, &mut features)?;
    let mut grown: Vec<PopulationMember> = Vec::new();
    if cfg.grow_f0 {
        grow_pool(&mut grown, &population);
    }

    for t in 1..=cfg.t_max {
        let is_final = t == cfg.t_max;
        let steps = if is_final { cfg.n_final } else { cfg.n_expl };
        let mjcfg = clamp_mjcfg(&cfg.mjmcmc, population.size());
        let mut seg = run_segment(&mut state, &population, &mjcfg, &mut scorer, &mut rng, steps);
        if is_final {
            if let Some(target) = cfg.final_unique_models {
                let mut extra = 0usize;
                let cap = cfg.n_final.saturating_mul(50);
                while scorer.registry.len() < target && extra < cap {
                    mjmcmc_step(&mut state, &population, &mjcfg, &mut scorer, &mut rng, &mut seg);
                    extra += 1;
                }
            }
        }
        let inclusion = seg.inclusion_estimates(population.size());
        adaptive.record_segment(&population, &inclusion, seg.steps as f64);
        trace.push(GenerationRecord {
            generation: t,
            population_keys: population.member_keys(),
            acceptance_rate: seg.acceptance_rate(),
            best_log_mass: seg.best().map(|(_, l)| l).unwrap_or(f64::NEG_INFINITY),
            registry_size: scorer.registry.len(),
        });

        if !is_final {
            let (keep, _removed) = filtrate(&population, &inclusion, cfg, &mut rng);
            let current_keys: HashSet<String> = population
                .members
                .iter()
                .enumerate()
                .filter(|(j, _)| state.current >> j & 1 == 1)
                .map(|(_, m)| m.feature.key().to_string())
                .collect();
            let survivors: Vec<PopulationMember> = population
                .members
                .iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(m, _)| m.clone())
                .collect();
            let n_new = cfg.s.saturating_sub(survivors.len());
            let members = transition(survivors, n_new, ctx, &grown, cfg, &adaptive, &mut rng);
            population = Population { members, generation: t + 1 };
            for m in &population.members {
                features.entry(m.feature.key().to_string()).or_insert_with(|| Arc::clone(&m.feature));
            }
            if cfg.grow_f0 {
                grow_pool(&mut grown, &population);
            }
            let carried: Vec<&str> = population
                .members
                .iter()
                .filter(|m| current_keys.contains(m.feature.key()))
                .map(|m| m.feature.key())
                .collect();
            let mask = population.mask_of_keys(&carried).unwrap_or(0);
            match scorer.score_mask(&population.members, mask) {
                Ok(score) => {
                    let visits = std::mem::take(&mut state.visit_counts);
                    state = ChainState::new(mask, score);
                    state.visit_counts = visits;
                }
                Err(_) => {
                    let score = scorer.score_features(&[]).expect("null model must stay scorable");
                    let visits = std::mem::take(&mut state.visit_counts);
                    state = ChainState::new(0, score);
                    state.visit_counts = visits;
                }
            }
        }
    }

    let (best_key, best_log_mass) = scorer
        .registry
        .iter()
        .map(|(k, s)| (k.clone(), s.log_mass()))
        .fold((String::from("null"), f64::NEG_INFINITY), |acc, (k, l)| if l > acc.1 { (k, l) } else { acc });
    Ok(RunOutput {
        registry: scorer.registry,
        visit_counts: state.visit_counts,
        trace,
        features,
        best_key,
        best_log_mass,
        glm_calls: scorer.glm_calls,
        wall_ms: started.elapsed().as_millis(),
        final_population: population.member_keys(),
        rgm_counters: None,
    })
}

/// One full RGMJMCMC run (a single chain). Outer states form the frequency
/// sample; the registry is shared with the renormalized estimator exactly as
/// in the non-reversible variant.
pub fn run_rgmjmcmc(
    ctx: &SearchContext,
    cfg: &GmjmcmcConfig,
    prior_a: f64,
    marginal_options: MarginalOptions,
    seed: u64,
) -> Result<RunOutput, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scorer = Scorer::new(ctx.family, prior_a, marginal_options, ctx.y.clone());
    let mut adaptive = AdaptiveState::new(cfg.adaptive, cfg.adapt_epsilon);
    let mut features: IndexMap<String, Arc<Feature>> = IndexMap::new();
    let mut trace = Vec::new();

    let InitOutcome { population, state } =
        init_population(ctx, cfg, &mut adaptive, &mut scorer, &mut rng, &mut features)?;

    let model: Vec<PopulationMember> = population
        .members
        .iter()
        .enumerate()
        .filter(|(j, _)| state.current >> j & 1 == 1)
        .map(|(_, m)| m.clone())
        .collect();
    // the init segment is burn-in: outer-state frequencies start fresh
    let mut rgm = RgmState {
        model,
        score: state.current_score,
        population,
        visit_counts: IndexMap::new(),
        counters: RgmCounters::default(),
    };

    let mut grown: Vec<PopulationMember> = Vec::new();
    if cfg.grow_f0 {
        grow_pool(&mut grown, &rgm.population);
    }
    let trace_every = (cfg.rgm_outer_steps / 50).max(1);
    for step in 0..cfg.rgm_outer_steps {
        rgmjmcmc_step(&mut rgm, ctx, &grown, cfg, &mut adaptive, &mut scorer, &mut rng, &mut features);
        if cfg.grow_f0 {
            grow_pool(&mut grown, &rgm.population);
        }
        if step % trace_every == 0 {
            trace.push(GenerationRecord {
                generation: step + 1,
                population_keys: rgm.population.member_keys(),
                acceptance_rate: rgm.counters.accepted as f64 / rgm.counters.outer_steps.max(1) as f64,
                best_log_mass: rgm.score.log_mass(),
                registry_size: scorer.registry.len(),
            });
        }
    }

    let (best_key, best_log_mass) = scorer
        .registry
        .iter()
        .map(|(k, s)| (k.clone(), s.log_mass()))
        .fold((String::from("null"), f64::NEG_INFINITY), |acc, (k, l)| if l > acc.1 { (k, l) } else { acc });
    let final_population = rgm.population.member_keys();
    Ok(RunOutput {
        registry: scorer.registry,
        visit_counts: rgm.visit_counts,
        trace,
        features,
        best_key,
        best_log_mass,
        glm_calls: scorer.glm_calls,
        wall_ms: started.elapsed().as_millis(),
        final_population,
        rgm_counters: Some(rgm.counters),
    })
}

/// Current position of a reversible chain: the model itself (with columns),
/// its score, and the population that generated it.
pub struct RgmState {
    pub model: Vec<PopulationMember>,
    pub score: ModelScore,
    pub population: Population,
    pub visit_counts: IndexMap<String, u64>,
    pub counters: RgmCounters,
}

impl RgmState {
    pub fn model_key(&self) -> String {
        let keys: Vec<&str> = self.model.iter().map(|m| m.feature.key()).collect();
        model_key(&keys)
    }
}

/// Propose a population around the current model (all its members retained,
/// remaining slots refilled), run a local chain, randomize, and apply the
/// two-stage acceptance rule. The backward search only runs when the
/// posterior-ratio stage has already passed; a backward population that lost
/// a component of the current model rejects outright.
pub fn rgmjmcmc_step(
    state: &mut RgmState,
    ctx: &SearchContext,
    grown: &[PopulationMember],
    cfg: &GmjmcmcConfig,
    adaptive: &mut AdaptiveState,
    scorer: &mut Scorer,
    rng: &mut ChaCha8Rng,
    features: &mut IndexMap<String, Arc<Feature>>,
) -> bool {
    state.counters.outer_steps += 1;
    let mjcfg = clamp_mjcfg(&cfg.mjmcmc, cfg.s);

    let accepted = 'step: {
        // forward population proposal around the current model
        let n_new = cfg.s.saturating_sub(state.model.len());
        let fwd_members = transition(state.model.clone(), n_new, ctx, grown, cfg, adaptive, rng);
        let fwd_pop = Population { members: fwd_members, generation: state.population.generation + 1 };
        for m in &fwd_pop.members {
            features.entry(m.feature.key().to_string()).or_insert_with(|| Arc::clone(&m.feature));
        }
        let start_mask: Mask = if state.model.is_empty() { 0 } else { (1u64 << state.model.len()) - 1 };

        // local search inside the proposed population
        let mut chain = ChainState::new(start_mask, state.score);
        let mut seg = SegmentStats::default();
        for _ in 0..cfg.rgm_local_steps {
            mjmcmc_step(&mut chain, &fwd_pop, &mjcfg, scorer, rng, &mut seg);
        }
        let m_k_fwd = chain.current;

        // randomize into the actual proposal
        let proposal = crate::mjmcmc::randomize(m_k_fwd, fwd_pop.size(), cfg.rho_r, rng);
        let d_fwd = (m_k_fwd ^ proposal).count_ones() as i64;
        if proposal.count_ones() as usize > cfg.q {
            break 'step None;
        }
        let prop_score = match scorer.score_mask(&fwd_pop.members, proposal) {
            Ok(s) => s,
            Err(_) => break 'step None,
        };

        // stage one: posterior ratio only
        state.counters.stage1_attempts += 1;
        let ln_r1 = prop_score.log_mass() - state.score.log_mass();
        if !(ln_r1 >= 0.0 || rng.gen::<f64>().ln() < ln_r1) {
            break 'step None;
        }
        state.counters.stage1_passes += 1;

        // stage two: generate the backward population and search
        state.counters.backward_runs += 1;
        let prop_members: Vec<PopulationMember> = fwd_pop
            .members
            .iter()
            .enumerate()
            .filter(|(j, _)| proposal >> j & 1 == 1)
            .map(|(_, m)| m.clone())
            .collect();
        let bwd_fill = cfg.s.saturating_sub(prop_members.len());
        let bwd_members = transition(prop_members.clone(), bwd_fill, ctx, grown, cfg, adaptive, rng);
        let bwd_pop = Population { members: bwd_members, generation: fwd_pop.generation };
        for m in &bwd_pop.members {
            features.entry(m.feature.key().to_string()).or_insert_with(|| Arc::clone(&m.feature));
        }

        // the reverse randomization density is zero if the backward population
        // lost any component of the current model
        let current_keys: Vec<&str> = state.model.iter().map(|m| m.feature.key()).collect();
        let current_mask_bwd = match bwd_pop.mask_of_keys(&current_keys) {
            Some(mask) => mask,
            None => {
                state.counters.zero_backward_rejections += 1;
                break 'step None;
            }
        };

        let start_bwd: Mask = if prop_members.is_empty() { 0 } else { (1u64 << prop_members.len()) - 1 };
        let mut chain_b = ChainState::new(start_bwd, prop_score);
        let mut seg_b = SegmentStats::default();
        for _ in 0..cfg.rgm_local_steps {
            mjmcmc_step(&mut chain_b, &bwd_pop, &mjcfg, scorer, rng, &mut seg_b);
        }
        let m_k_bwd = chain_b.current;
        let d_bwd = (current_mask_bwd ^ m_k_bwd).count_ones() as i64;

        let ln_r2 = (d_bwd - d_fwd) as f64 * cfg.rho_r.ln();
        if ln_r2 >= 0.0 || rng.gen::<f64>().ln() < ln_r2 {
            Some((prop_members, prop_score, fwd_pop))
        } else {
            None
        }
    };

    let moved = accepted.is_some();
    if let Some((model, score, pop)) = accepted {
        state.model = model;
        state.score = score;
        state.population = pop;
        state.counters.accepted += 1;
    }
    let key = state.model_key();
    *state.visit_counts.entry(key).or_insert(0) += 1;
    // adaptive stats see the outer state once per step
    let mask = state
        .population
        .mask_of_keys(&state.model.iter().map(|m| m.feature.key().to_string()).collect::<Vec<_>>())
        .unwrap_or(0);
    adaptive.record_state(&state.population, mask);
    moved
}

/// Convenience: run B independent chains (threaded) with per-chain seeds at a
/// fixed offset from the master seed, in chain order.
pub struct ChainSpec<'a> {
    pub ctx: &'a SearchContext<'a>,
    pub cfg: &'a GmjmcmcConfig,
    pub prior_a: f64,
    pub marginal_options: MarginalOptions,
    pub reversible: bool,
}

pub fn run_chains(spec: &ChainSpec, chains: usize, master_seed: u64) -> Result<Vec<RunOutput>, RunError> {
    if chains == 1 {
        let out = if spec.reversible {
            run_rgmjmcmc(spec.ctx, spec.cfg, spec.prior_a, spec.marginal_options, master_seed)?
        } else {
            run_gmjmcmc(spec.ctx, spec.cfg, spec.prior_a, spec.marginal_options, master_seed)?
        };
        return Ok(vec![out]);
    }
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(chains);
        for b in 0..chains {
            let seed = master_seed.wrapping_add(b as u64);
            handles.push(scope.spawn(move || {
                if spec.reversible {
                    run_rgmjmcmc(spec.ctx, spec.cfg, spec.prior_a, spec.marginal_options, seed)
                } else {
                    run_gmjmcmc(spec.ctx, spec.cfg, spec.prior_a, spec.marginal_options, seed)
                }
            }));
        }
        handles.into_iter().map(|h| h.join().expect("search chain panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_ctx(n: usize, m: usize) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(n, m, |i, j| (((i + 1) * (j + 3)) as f64 * 0.43).sin());
        let y = DVector::from_fn(n, |i, _| {
            1.0 + 0.9 * x[(i, 0)] - 0.7 * x[(i, 1)] + 0.25 * ((i as f64) * 0.29).cos()
        });
        (x, y)
    }

    fn base_cfg(m: usize) -> GmjmcmcConfig {
        let mut cfg = GmjmcmcConfig::for_problem(m, 5, 3);
        cfg.s = 8;
        cfg.q = 5;
        cfg.mjmcmc.max_model_size = 5;
        cfg.mjmcmc.jump_size_min = 1;
        cfg.mjmcmc.jump_size_max = 3;
        cfg.t_max = 3;
        cfg.n_init = 60;
        cfg.n_expl = 50;
        cfg.n_final = 60;
        cfg
    }

    #[test]
    fn config_validation_catches_bad_probabilities() {
        let mut cfg = base_cfg(4);
        cfg.p_mutation = 0.5;
        assert!(cfg.validate().is_err());
        cfg.p_mutation = 0.1;
        assert!(cfg.validate().is_ok());
        cfg.q = cfg.s + 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn filtrate_contracts() {
        let (x, y) = toy_ctx(40, 4);
        let gset = TransformationSet::g1();
        let ctx = SearchContext::new(&x, &y, Family::GaussianIdentity, &gset);
        let pop = Population {
            members: (0..4).map(|j| ctx.f0[j].clone()).collect(),
            generation: 0,
        };
        let mut cfg = base_cfg(4);
        cfg.filtration_threshold = 0.5;
        cfg.p_del = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        // all above threshold: nothing removed
        let (keep, removed) = filtrate(&pop, &[0.9, 0.8, 0.7, 0.6], &cfg, &mut rng);
        assert!(keep.iter().all(|k| *k));
        assert_eq!(removed, 0);

        // all below with p_del = 1 and no protection: all removed
        let (keep, removed) = filtrate(&pop, &[0.1, 0.1, 0.1, 0.1], &cfg, &mut rng);
        assert!(keep.iter().all(|k| !*k));
        assert_eq!(removed, 4);

        // protected covariate survives zero inclusion
        cfg.keep_always = vec![2];
        let (keep, _) = filtrate(&pop, &[0.0, 0.0, 0.0, 0.0], &cfg, &mut rng);
        assert!(keep[2]);
        assert!(!keep[0]);
    }

    #[test]
    fn transition_with_pure_mutation_yields_raw_covariates() {
        let (x, y) = toy_ctx(40, 6);
        let gset = TransformationSet::g1();
        let ctx = SearchContext::new(&x, &y, Family::GaussianIdentity, &gset);
        let mut cfg = base_cfg(6);
        cfg.p_mutation = 1.0;
        cfg.p_modification = 0.0;
        cfg.p_crossover = 0.0;
        cfg.p_projection = 0.0;
        let adaptive = AdaptiveState::new(false, 0.01);
        let mut scorer =
            Scorer::new(Family::GaussianIdentity, (-2.0f64).exp(), MarginalOptions::default(), y.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let members = transition(Vec::new(), 4, &ctx, &[], &cfg, &adaptive, &mut rng);
        assert_eq!(members.len(), 4);
        for m in &members {
            assert!(matches!(m.feature.node(), FeatureNode::Leaf(_)));
        }
    }

    #[test]
    fn transition_with_pure_projection_yields_projections() {
        let (x, y) = toy_ctx(60, 5);
        let gset = TransformationSet::from_names(&["sigmoid"]).unwrap();
        let ctx = SearchContext::new(&x, &y, Family::GaussianIdentity, &gset);
        let mut cfg = base_cfg(5);
        cfg.p_mutation = 0.0;
        cfg.p_modification = 0.0;
        cfg.p_crossover = 0.0;
        cfg.p_projection = 1.0;
        let adaptive = AdaptiveState::new(false, 0.01);
        let mut scorer =
            Scorer::new(Family::GaussianIdentity, (-2.0f64).exp(), MarginalOptions::default(), y.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let survivors: Vec<PopulationMember> = (0..3).map(|j| ctx.f0[j].clone()).collect();
        let members = transition(survivors, 3, &ctx, &[], &cfg, &adaptive, &mut rng);
        assert_eq!(members.len(), 6);
        let new_members = &members[3..];
        for m in new_members {
            assert!(
                matches!(m.feature.node(), FeatureNode::Projection { g, .. } if g.name() == "sigmoid"),
                "expected a sigmoid projection, got {}",
                m.feature.key()
            );
        }
    }

    #[test]
    fn transition_never_produces_duplicates_or_dependence() {
        let (x, y) = toy_ctx(50, 5);
        let gset = TransformationSet::g1();
        let ctx = SearchContext::new(&x, &y, Family::GaussianIdentity, &gset);
        let cfg = base_cfg(5);
        let adaptive = AdaptiveState::new(true, 0.01);
        let mut scorer =
            Scorer::new(Family::GaussianIdentity, (-2.0f64).exp(), MarginalOptions::default(), y.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let survivors: Vec<PopulationMember> = (0..2).map(|j| ctx.f0[j].clone()).collect();
        let members = transition(survivors, 6, &ctx, &[], &cfg, &adaptive, &mut rng);
        assert_eq!(members.len(), 8);
        let keys: HashSet<&str> = members.iter().map(|m| m.feature.key()).collect();
        assert_eq!(keys.len(), members.len(), "duplicate canonical keys in population");
        // full-rank check: orthonormal basis must absorb every column
        let cols: Vec<&DVector<f64>> = members.iter().map(|m| &m.column).collect();
        let basis = orthonormal_basis(x.nrows(), &cols);
        assert_eq!(basis.len(), members.len() + 1);
        for m in &members {
            assert!(m.feature.depth() <= cfg.d_max);
        }
    }

    #[test]
    fn adaptive_state_contracts() {
        let mut st = AdaptiveState::new(true, 0.01);
        assert!((st.estimate("unseen") - 0.5).abs() < 1e-12);
        let (x, _) = toy_ctx(10, 3);
        let pop = Population {
            members: (0..3)
                .map(|j| PopulationMember { feature: Feature::leaf(j), column: x.column(j).into_owned() })
                .collect(),
            generation: 0,
        };
        // feature 0 never included: estimate clamps at epsilon
        st.record_segment(&pop, &[0.0, 1.0, 0.4], 100.0);
        assert!((st.estimate("x1") - 0.01).abs() < 1e-12);
        assert!((st.estimate("x2") - 0.99).abs() < 1e-12);
        assert!((st.estimate("x3") - 0.4).abs() < 1e-12);
        // disabled adaptation means uniform weights
        let off = AdaptiveState::new(false, 0.01);
        assert_eq!(off.weight_explore("x1"), 1.0);
        assert_eq!(off.weight_exploit("x1"), 1.0);
        // diminishing adaptation: k-th single-state update moves the estimate O(1/k)
        let mut drift = AdaptiveState::new(true, 0.01);
        drift.record_segment(&pop, &[0.4, 0.4, 0.4], 50.0);
        let before = drift.estimate("x1");
        drift.record_state(&pop, 0b001);
        let after = drift.estimate("x1");
        assert!((after - before).abs() <= 1.0 / 50.0 + 1e-9);
    }

    #[test]
    fn gmjmcmc_run_is_deterministic_under_seed() {
        let (x, y) = toy_ctx(60, 5);
        let gset = TransformationSet::g1();
        let ctx = SearchContext::new(&x, &y, Family::GaussianIdentity, &gset);
        let cfg = base_cfg(5);
        let a = (-2.0f64).exp();
        let r1 = run_gmjmcmc(&ctx, &cfg, a, MarginalOptions::default(), 99).unwrap();
        let r2 = run_gmjmcmc(&ctx, &cfg, a, MarginalOptions::default(), 99).unwrap();
        assert_eq!(r1.registry.dump(), r2.registry.dump());
        assert_eq!(r1.final_population, r2.final_population);
        let r3 = run_gmjmcmc(&ctx, &cfg, a, MarginalOptions::default(), 100).unwrap();
        assert_ne!(r1.registry.dump(), r3.registry.dump());
    }

    #[test]
    fn registry_grows_monotonically_across_generations() {
        let (x, y) = toy_ctx(60, 5);
        let gset = TransformationSet::g1();
        let ctx = SearchContext::new(&x, &y, Family::GaussianIdentity, &gset);
        let cfg = base_cfg(5);
        let out = run_gmjmcmc(&ctx, &cfg, (-2.0f64).exp(), MarginalOptions::default(), 3).unwrap();
        let sizes: Vec<usize> = out.trace.iter().map(|t| t.registry_size).collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn population_invariants_hold_every_generation() {
        let (x, y) = toy_ctx(60, 5);
        let gset = TransformationSet::g1();
        let ctx = SearchContext::new(&x, &y, Family::GaussianIdentity, &gset);
        let mut cfg = base_cfg(5);
        cfg.t_max = 4;
        let out = run_gmjmcmc(&ctx, &cfg, (-2.0f64).exp(), MarginalOptions::default(), 17).unwrap();
        for record in &out.trace {
            assert_eq!(record.population_keys.len(), cfg.s, "population size drifted");
            let unique: HashSet<&String> = record.population_keys.iter().collect();
            assert_eq!(unique.len(), cfg.s, "duplicate members in a population");
        }
    }

    #[test]
    fn rgmjmcmc_runs_and_counts_stages() {
        let (x, y) = toy_ctx(60, 5);
        let gset = TransformationSet::g1();
        let ctx = SearchContext::new(&x, &y, Family::GaussianIdentity, &gset);
        let mut cfg = base_cfg(5);
        cfg.rgm_outer_steps = 80;
        cfg.rgm_local_steps = 4;
        let out = run_rgmjmcmc(&ctx, &cfg, (-2.0f64).exp(), MarginalOptions::default(), 23).unwrap();
        let c = out.rgm_counters.unwrap();
        assert_eq!(c.outer_steps, 80);
        // the whole point of delayed acceptance: backward searches only run
        // after stage one has passed
        assert_eq!(c.backward_runs, c.stage1_passes);
        assert!(c.stage1_passes <= c.stage1_attempts);
        let visits: u64 = out.visit_counts.values().sum();
        assert_eq!(visits, 80);
    }

    #[test]
    fn keep_always_members_survive_every_filtration() {
        let (x, y) = toy_ctx(60, 5);
        let gset = TransformationSet::g1();
        let ctx = SearchContext::new(&x, &y, Family::GaussianIdentity, &gset);
        let mut cfg = base_cfg(5);
        cfg.keep_always = vec![4];
        cfg.filtration_threshold = 1.0; // everything is "below threshold"
        cfg.t_max = 4;
        let out = run_gmjmcmc(&ctx, &cfg, (-2.0f64).exp(), MarginalOptions::default(), 31).unwrap();
        for record in &out.trace {
            assert!(
                record.population_keys.iter().any(|k| k == "x5"),
                "protected covariate missing at generation {}",
                record.generation
            );
        }
    }
}
