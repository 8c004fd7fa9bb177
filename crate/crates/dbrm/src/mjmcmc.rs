//! Mode-jumping Metropolis–Hastings over the 2^s model space spanned by a
//! fixed feature population.
//!
//! Models are bit masks over the population (bit j selects member j). Most
//! steps are plain single-bit-flip Metropolis–Hastings moves. With a small
//! probability a step instead makes a mode jump: flip many bits at once,
//! greedily ascend to a nearby mode, then randomize lightly. The matching
//! backward path is generated from the proposal with the same kernels, and
//! only the randomization densities enter the acceptance ratio.
//!
//! Models whose size exceeds the cap (or that cannot be scored) have zero
//! target mass and are rejected; every model that gets scored along the way,
//! including all auxiliary ones, lands in the registry.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scoring::{ModelScore, PopulationMember, Scorer};

/// A model as a subset of population slots. Populations never exceed 64
/// members.
pub type Mask = u64;

pub const MAX_POPULATION_SIZE: usize = 64;

/// Tuning of the mode-jumping kernel on one population.
#[derive(Clone, Debug)]
pub struct MjmcmcConfig {
    /// Probability that a step is a mode jump rather than a single-bit flip.
    pub prob_large_jump: f64,
    /// Inclusive bounds for the number of bits flipped by a large jump.
    pub jump_size_min: usize,
    pub jump_size_max: usize,
    /// Greedy ascent steps inside a mode jump.
    pub local_opt_steps: usize,
    /// Per-bit flip probability of the randomization kernel (in (0, 0.5)).
    pub randomize_prob: f64,
    /// Maximum number of features in a model.
    pub max_model_size: usize,
}

impl MjmcmcConfig {
    pub fn validate(&self, s: usize) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.prob_large_jump) {
            return Err("prob_large_jump must lie in [0,1)".into());
        }
        if self.jump_size_min < 1 || self.jump_size_min > self.jump_size_max {
            return Err("jump size range must satisfy 1 <= min <= max".into());
        }
        if self.jump_size_max > s {
            return Err(format!("jump_size_max {} exceeds population size {}", self.jump_size_max, s));
        }
        if !(self.randomize_prob > 0.0 && self.randomize_prob < 0.5) {
            return Err("randomize_prob must lie in (0, 0.5)".into());
        }
        if self.max_model_size == 0 {
            return Err("max_model_size must be at least 1".into());
        }
        Ok(())
    }
}

/// The search space: an ordered set of features with their evaluated columns.
#[derive(Clone, Debug, Default)]
pub struct Population {
    pub members: Vec<PopulationMember>,
    pub generation: usize,
}

impl Population {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn member_keys(&self) -> Vec<String> {
        self.members.iter().map(|m| m.feature.key().to_string()).collect()
    }

    pub fn index_of_key(&self, key: &str) -> Option<usize> {
        self.members.iter().position(|m| m.feature.key() == key)
    }

    pub fn mask_of_keys<S: AsRef<str>>(&self, keys: &[S]) -> Option<Mask> {
        let mut mask = 0u64;
        for k in keys {
            mask |= 1u64 << self.index_of_key(k.as_ref())?;
        }
        Some(mask)
    }
}

/// Current position of one chain plus its visit bookkeeping.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub current: Mask,
    pub current_score: ModelScore,
    /// Visit counts per model key, updated once per step (rejections re-count
    /// the current model).
    pub visit_counts: IndexMap<String, u64>,
}

impl ChainState {
    pub fn new(current: Mask, current_score: ModelScore) -> Self {
        Self { current, current_score, visit_counts: IndexMap::new() }
    }
}

/// Models scored or visited during one segment, with acceptance bookkeeping.
/// The per-member inclusion estimates that drive filtration come from here.
#[derive(Clone, Debug, Default)]
pub struct SegmentStats {
    pub visited: IndexMap<Mask, f64>,
    pub steps: u64,
    pub accepted: u64,
}

impl SegmentStats {
    pub fn record(&mut self, mask: Mask, log_mass: f64) {
        self.visited.entry(mask).or_insert(log_mass);
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }

    /// Renormalized marginal inclusion of each population slot over the
    /// models seen in this segment.
    pub fn inclusion_estimates(&self, s: usize) -> Vec<f64> {
        let mut incl = vec![0.0; s];
        if self.visited.is_empty() {
            return incl;
        }
        let max = self.visited.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut weights: Vec<(Mask, f64)> = Vec::with_capacity(self.visited.len());
        for (mask, lm) in &self.visited {
            let w = (lm - max).exp();
            total += w;
            weights.push((*mask, w));
        }
        for (mask, w) in weights {
            for (j, slot) in incl.iter_mut().enumerate().take(s) {
                if mask >> j & 1 == 1 {
                    *slot += w / total;
                }
            }
        }
        incl
    }

    pub fn best(&self) -> Option<(Mask, f64)> {
        self.visited.iter().map(|(m, l)| (*m, *l)).fold(None, |acc, (m, l)| match acc {
            Some((_, bl)) if bl >= l => acc,
            _ => Some((m, l)),
        })
    }
}

fn popcount(mask: Mask) -> usize {
    mask.count_ones() as usize
}

fn hamming(a: Mask, b: Mask) -> usize {
    (a ^ b).count_ones() as usize
}

/// Choose `k` distinct positions out of `0..s` (partial Fisher–Yates).
fn sample_positions(s: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s).collect();
    for i in 0..k {
        let j = rng.gen_range(i..s);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Switch off uniformly chosen bits until the size cap holds.
fn truncate_to_cap(mut mask: Mask, cap: usize, rng: &mut ChaCha8Rng) -> Mask {
    while popcount(mask) > cap {
        let set: Vec<usize> = (0..MAX_POPULATION_SIZE).filter(|j| mask >> j & 1 == 1).collect();
        let drop = set[rng.gen_range(0..set.len())];
        mask &= !(1u64 << drop);
    }
    mask
}

/// Large-jump kernel: flip `k` uniformly chosen distinct bits, `k` uniform on
/// the configured range, then truncate to the size cap.
pub fn large_jump(current: Mask, s: usize, cfg: &MjmcmcConfig, rng: &mut ChaCha8Rng) -> Mask {
    let k = rng.gen_range(cfg.jump_size_min..=cfg.jump_size_max.min(s));
    let mut mask = current;
    for j in sample_positions(s, k, rng) {
        mask ^= 1u64 << j;
    }
    truncate_to_cap(mask, cfg.max_model_size, rng)
}

/// Greedy ascent on log mass: at each step score all single-bit flips that
/// respect the size cap and move to the best strictly improving neighbor,
/// stopping early at a local mode. Every evaluated model enters the registry.
pub fn local_optimize(
    start: Mask,
    steps: usize,
    cap: usize,
    pop: &Population,
    scorer: &mut Scorer,
    seg: &mut SegmentStats,
) -> Mask {
    let s = pop.size();
    let mut current = start;
    let mut current_mass = match scorer.score_mask(&pop.members, current) {
        Ok(sc) => {
            seg.record(current, sc.log_mass());
            sc.log_mass()
        }
        Err(_) => f64::NEG_INFINITY,
    };
    for _ in 0..steps {
        let mut best: Option<(Mask, f64)> = None;
        for j in 0..s {
            let neighbor = current ^ (1u64 << j);
            if popcount(neighbor) > cap {
                continue;
            }
            if let Ok(sc) = scorer.score_mask(&pop.members, neighbor) {
                let lm = sc.log_mass();
                seg.record(neighbor, lm);
                if lm > current_mass && best.map_or(true, |(_, b)| lm > b) {
                    best = Some((neighbor, lm));
                }
            }
        }
        match best {
            Some((next, lm)) => {
                current = next;
                current_mass = lm;
            }
            None => break,
        }
    }
    current
}

/// Randomization kernel: flip each bit independently with probability `rho`.
pub fn randomize(v: Mask, s: usize, rho: f64, rng: &mut ChaCha8Rng) -> Mask {
    let mut out = v;
    for j in 0..s {
        if rng.gen_bool(rho) {
            out ^= 1u64 << j;
        }
    }
    out
}

/// Log density of the randomization kernel,
/// `ln[ρ^d(v,v') (1−ρ)^(s−d(v,v'))]`. Symmetric in its arguments.
pub fn ln_randomize_density(from: Mask, to: Mask, s: usize, rho: f64) -> f64 {
    let d = hamming(from, to) as f64;
    d * rho.ln() + (s as f64 - d) * (1.0 - rho).ln()
}

/// One step of the composite kernel. Returns true when the proposal was
/// accepted.
pub fn mjmcmc_step(
    state: &mut ChainState,
    pop: &Population,
    cfg: &MjmcmcConfig,
    scorer: &mut Scorer,
    rng: &mut ChaCha8Rng,
    seg: &mut SegmentStats,
) -> bool {
    let s = pop.size();
    let cap = cfg.max_model_size;
    seg.steps += 1;

    let accepted = if rng.gen_bool(cfg.prob_large_jump) {
        // forward: large jump, greedy ascent, light randomization
        let jump0 = large_jump(state.current, s, cfg, rng);
        let opt_fwd = local_optimize(jump0, cfg.local_opt_steps, cap, pop, scorer, seg);
        let proposal = randomize(opt_fwd, s, cfg.randomize_prob, rng);
        if popcount(proposal) > cap {
            false
        } else {
            match scorer.score_mask(&pop.members, proposal) {
                Err(_) => false,
                Ok(prop_score) => {
                    seg.record(proposal, prop_score.log_mass());
                    // backward auxiliary path from the proposal
                    let jump_b = large_jump(proposal, s, cfg, rng);
                    let opt_bwd = local_optimize(jump_b, cfg.local_opt_steps, cap, pop, scorer, seg);
                    let ln_fwd = ln_randomize_density(opt_fwd, proposal, s, cfg.randomize_prob);
                    let ln_bwd = ln_randomize_density(opt_bwd, state.current, s, cfg.randomize_prob);
                    let ln_ratio = prop_score.log_mass() + ln_bwd - state.current_score.log_mass() - ln_fwd;
                    if ln_ratio >= 0.0 || rng.gen::<f64>().ln() < ln_ratio {
                        state.current = proposal;
                        state.current_score = prop_score;
                        true
                    } else {
                        false
                    }
                }
            }
        }
    } else {
        // plain single-bit-flip Metropolis–Hastings
        let j = rng.gen_range(0..s);
        let proposal = state.current ^ (1u64 << j);
        if popcount(proposal) > cap {
            false
        } else {
            match scorer.score_mask(&pop.members, proposal) {
                Err(_) => false,
                Ok(prop_score) => {
                    seg.record(proposal, prop_score.log_mass());
                    let ln_ratio = prop_score.log_mass() - state.current_score.log_mass();
                    if ln_ratio >= 0.0 || rng.gen::<f64>().ln() < ln_ratio {
                        state.current = proposal;
                        state.current_score = prop_score;
                        true
                    } else {
                        false
                    }
                }
            }
        }
    };

    if accepted {
        seg.accepted += 1;
    }
    seg.record(state.current, state.current_score.log_mass());
    let key = pop_model_key(pop, state.current);
    *state.visit_counts.entry(key).or_insert(0) += 1;
    accepted
}

pub fn pop_model_key(pop: &Population, mask: Mask) -> String {
    let keys: Vec<&str> =
        pop.members.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, m)| m.feature.key()).collect();
    crate::scoring::model_key(&keys)
}

/// Run `n_steps` of the kernel, collecting segment statistics.
pub fn run_segment(
    state: &mut ChainState,
    pop: &Population,
    cfg: &MjmcmcConfig,
    scorer: &mut Scorer,
    rng: &mut ChaCha8Rng,
    n_steps: usize,
) -> SegmentStats {
    let mut seg = SegmentStats::default();
    for _ in 0..n_steps {
        mjmcmc_step(state, pop, cfg, scorer, rng, &mut seg);
    }
    seg
}
