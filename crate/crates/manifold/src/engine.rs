//! Cross-entropy optimization: the generic sample/score/elite/update loop,
//! and the pair search that drives the simulator looking for a
//! vanilla/perturbed path pair straddling the collision boundary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{self, CostConfig, DatasetStats, PairCandidate, SimulatedPath};
use crate::error::{Error, Result};
use crate::hybrid::{
    self, CategoricalStep, GaussianStep, HybridParams, HybridPath, ImportanceWeightConfig,
    MOVE_COUNT,
};
use crate::rng::{self, derive_seed};
use crate::sim::{run_scenario, ScenarioConfig};

/// Batch and schedule parameters for one CE run. The seed has no default:
/// every run names its randomness explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeConfig {
    /// Batch size N.
    pub batch_size: usize,
    /// Elite fraction rho in (0, 1).
    pub elite_fraction: f64,
    /// Smoothing factor alpha in [0, 1].
    pub smoothing: f64,
    /// Stop after this many consecutive iterations with an unchanged gamma.
    pub stall_depth: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl CeConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            batch_size: 100,
            elite_fraction: 0.1,
            smoothing: 0.8,
            stall_depth: 3,
            max_iterations: 60,
            seed,
        }
    }

    /// Elite cardinality: ceil(rho * N).
    pub fn elite_count(&self) -> usize {
        (self.elite_fraction * self.batch_size as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err(Error::InvalidParameter {
                name: "ce.elite_fraction".into(),
                reason: format!("{} must lie in (0, 1)", self.elite_fraction),
            });
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::InvalidParameter {
                name: "ce.smoothing".into(),
                reason: format!("{} must lie in [0, 1]", self.smoothing),
            });
        }
        if self.elite_count() < 2 {
            return Err(Error::InvalidParameter {
                name: "ce.batch_size".into(),
                reason: format!(
                    "elite count ceil(rho*N) = {} must be at least 2",
                    self.elite_count()
                ),
            });
        }
        if self.max_iterations == 0 || self.stall_depth == 0 {
            return Err(Error::InvalidParameter {
                name: "ce.max_iterations".into(),
                reason: "max_iterations and stall_depth must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Whether lower or higher scores are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Minimize,
    Maximize,
}

/// Gamma (the score at the elite boundary) and the elite indices.
///
/// The elite is exactly `ceil(rho * N)` members: scores are ranked with
/// index order breaking ties, and gamma is the score at the final elite
/// rank. Under `Minimize` the elite is the lowest-scoring members; under
/// `Maximize` the highest.
pub fn elite_select(scores: &[f64], rho: f64, orientation: Orientation) -> (f64, Vec<usize>) {
    assert!(!scores.is_empty(), "elite_select requires scores");
    let n = scores.len();
    let n_elite = ((rho * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let cmp = scores[a].partial_cmp(&scores[b]).expect("finite scores");
        let cmp = match orientation {
            Orientation::Minimize => cmp,
            Orientation::Maximize => cmp.reverse(),
        };
        cmp.then(a.cmp(&b))
    });
    let elite: Vec<usize> = order[..n_elite].to_vec();
    let gamma = scores[elite[n_elite - 1]];
    (gamma, elite)
}

/// One iteration's summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub gamma: f64,
    pub best_score: f64,
    pub elite_size: usize,
    pub params_digest: String,
}

/// Export history as line-delimited records with the contract keys
/// `iteration`, `gamma`, `best_score`, `elite_size`.
pub fn history_to_jsonl(history: &[IterationReport]) -> String {
    let mut out = String::new();
    for r in history {
        let line = serde_json::json!({
            "iteration": r.iteration,
            "gamma": r.gamma,
            "best_score": r.best_score,
            "elite_size": r.elite_size,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// A parametric sampling distribution CE can iterate on.
pub trait SampleFamily: Sized + Sync {
    type Sample: Clone + Send + Sync;

    /// Draw one sample; a pure function of `(self, seed)`.
    fn sample(&self, seed: u64) -> Self::Sample;

    /// Re-fit the parameters to a weighted elite set.
    fn update(&self, elite: &[&Self::Sample], weights: &[f64]) -> Result<Self>;

    /// `alpha * self + (1 - alpha) * previous`, where `self` is the updated
    /// parameter vector.
    fn blend(&self, previous: &Self, alpha: f64) -> Result<Self>;

    /// Stable digest of the parameter vector.
    fn digest(&self) -> u64;
}

/// Independent per-coordinate Gaussians; the classic CE family for
/// continuous optimization and the one exercised by the quadratic
/// convergence check.
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentGaussians {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl IndependentGaussians {
    pub fn new(means: Vec<f64>, vars: Vec<f64>) -> Self {
        assert_eq!(means.len(), vars.len());
        Self { means, vars }
    }
}

impl SampleFamily for IndependentGaussians {
    type Sample = Vec<f64>;

    fn sample(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::rng_from_seed(seed);
        self.means
            .iter()
            .zip(&self.vars)
            .map(|(&m, &v)| rng::normal(&mut rng, m, v))
            .collect()
    }

    fn update(&self, elite: &[&Vec<f64>], weights: &[f64]) -> Result<Self> {
        if elite.is_empty() {
            return Err(Error::EmptyElite);
        }
        let total: f64 = weights.iter().sum();
        let dim = self.means.len();
        let mut means = vec![0.0; dim];
        let mut vars = vec![0.0; dim];
        for j in 0..dim {
            means[j] = elite
                .iter()
                .zip(weights)
                .map(|(s, &w)| w * s[j])
                .sum::<f64>()
                / total;
            vars[j] = elite
                .iter()
                .zip(weights)
                .map(|(s, &w)| {
                    let d = s[j] - means[j];
                    w * d * d
                })
                .sum::<f64>()
                / total;
            vars[j] = vars[j].max(hybrid::VAR_FLOOR);
        }
        Ok(Self { means, vars })
    }

    fn blend(&self, previous: &Self, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidAlpha(alpha));
        }
        let mix = |n: &f64, o: &f64| alpha * n + (1.0 - alpha) * o;
        Ok(Self {
            means: self.means.iter().zip(&previous.means).map(|(n, o)| mix(n, o)).collect(),
            vars: self.vars.iter().zip(&previous.vars).map(|(n, o)| mix(n, o)).collect(),
        })
    }

    fn digest(&self) -> u64 {
        let mut h = crate::digest::Hasher::new();
        for v in self.means.iter().chain(&self.vars) {
            h.update(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

impl SampleFamily for HybridParams {
    type Sample = HybridPath;

    fn sample(&self, seed: u64) -> HybridPath {
        hybrid::sample_path(self, seed)
    }

    fn update(&self, elite: &[&HybridPath], weights: &[f64]) -> Result<Self> {
        let cat = hybrid::update_categorical(elite, weights, self.arity())?;
        let gauss = hybrid::update_gaussian(elite, weights)?;
        HybridParams::new(cat, gauss)
    }

    fn blend(&self, previous: &Self, alpha: f64) -> Result<Self> {
        hybrid::smooth(self, previous, alpha)
    }

    fn digest(&self) -> u64 {
        HybridParams::digest(self)
    }
}

/// Result of a generic CE run.
#[derive(Debug, Clone)]
pub struct CeOutcome<F: SampleFamily> {
    pub best_sample: F::Sample,
    pub best_score: f64,
    pub history: Vec<IterationReport>,
    pub family: F,
}

/// Generic CE optimization (maximization). Iterates sample, score, elite
/// selection at the `(1-rho)` quantile, update, and smoothing; stops when
/// gamma is unchanged for `stall_depth` consecutive iterations or the
/// iteration budget runs out. Samples scoring non-finite are discarded; a
/// batch with no finite score is a degenerate objective.
pub fn ce_optimize<F, O>(objective: O, initial: F, cfg: &CeConfig) -> Result<CeOutcome<F>>
where
    F: SampleFamily,
    O: Fn(&F::Sample) -> f64 + Sync,
{
    cfg.validate()?;
    let mut family = initial;
    let mut best: Option<(f64, F::Sample)> = None;
    let mut history = Vec::new();
    let mut prev_gamma: Option<f64> = None;
    let mut stall = 0usize;

    for iteration in 0..cfg.max_iterations {
        let samples: Vec<F::Sample> = (0..cfg.batch_size)
            .map(|k| family.sample(derive_seed(cfg.seed, &[iteration as u64, k as u64])))
            .collect();
        let scores: Vec<f64> = samples.par_iter().map(&objective).collect();

        let valid: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
        if valid.is_empty() {
            return Err(Error::DegenerateObjective);
        }
        let valid_scores: Vec<f64> = valid.iter().map(|&i| scores[i]).collect();
        let effective_rho = (cfg.elite_count() as f64 / valid.len() as f64).min(1.0);
        let (gamma, elite_pos) = elite_select(&valid_scores, effective_rho, Orientation::Maximize);
        let elite_idx: Vec<usize> = elite_pos.iter().map(|&p| valid[p]).collect();

        for &i in &elite_idx {
            if best.as_ref().is_none_or(|(s, _)| scores[i] > *s) {
                best = Some((scores[i], samples[i].clone()));
            }
        }

        let elite_samples: Vec<&F::Sample> = elite_idx.iter().map(|&i| &samples[i]).collect();
        let weights = vec![1.0; elite_samples.len()];
        let updated = family.update(&elite_samples, &weights)?;
        family = updated.blend(&family, cfg.smoothing)?;

        history.push(IterationReport {
            iteration,
            gamma,
            best_score: best.as_ref().map(|(s, _)| *s).unwrap_or(f64::NEG_INFINITY),
            elite_size: elite_idx.len(),
            params_digest: format!("{:016x}", family.digest()),
        });

        if prev_gamma.is_some_and(|p| p.to_bits() == gamma.to_bits()) {
            stall += 1;
        } else {
            stall = 0;
        }
        prev_gamma = Some(gamma);
        if stall >= cfg.stall_depth {
            break;
        }
    }

    let (best_score, best_sample) = best.expect("at least one finite iteration");
    Ok(CeOutcome {
        best_sample,
        best_score,
        history,
        family,
    })
}

/// Mostly-forward naturalistic prior over adversary paths: lane changes are
/// rare (with a slight bias toward the ego's side of the road, matching the
/// cut-in scenario under study) and accelerations are modest. This is the
/// un-updated distribution rudimentary paths sample from.
pub fn driving_prior(steps: usize) -> HybridParams {
    // stay, forward, forward-left, forward-right, left, right
    let probs = vec![0.04, 0.90, 0.005, 0.025, 0.005, 0.025];
    debug_assert_eq!(probs.len(), MOVE_COUNT);
    let cat = vec![CategoricalStep::new(probs).expect("prior normalized"); steps];
    let gauss = vec![GaussianStep::new(0.0, 1.0).expect("prior gaussian"); steps];
    HybridParams::new(cat, gauss).expect("prior params")
}

/// Final state of a pair search.
///
/// `vanilla_params`/`perturbed_params`/`ind_adv_params` are the
/// distributions as they stood in the iteration that produced the returned
/// pair; they are what generated it, and they retain the sampling spread
/// helper variants need. The fully-updated final state is in
/// `final_vanilla_params` etc.
#[derive(Debug, Clone)]
pub struct PairSearchState {
    pub vanilla_params: HybridParams,
    pub perturbed_params: HybridParams,
    pub ind_adv_params: HybridParams,
    pub final_vanilla_params: HybridParams,
    pub final_perturbed_params: HybridParams,
    pub final_ind_adv_params: HybridParams,
    pub archive_stats: DatasetStats,
    pub history: Vec<IterationReport>,
    /// The independent-adversary path that accompanied the returned pair.
    pub ind_adv_path: HybridPath,
    /// Times the distributions were re-seeded from the prior after stalling
    /// with no compliant candidate.
    pub restarts: usize,
}

/// Consecutive all-violating iterations tolerated before the distributions
/// are re-seeded from the prior. Elite pressure toward near-identical pairs
/// can starve the move tails before a collision is ever sampled; restarting
/// a stalled search costs nothing (no compliant candidate exists yet) and
/// gives the batch fresh prior mass.
const RESTART_STALL: usize = 8;

struct ScoredCandidate {
    score: f64,
    pair: PairCandidate,
    ind_path: HybridPath,
}

/// The three distributions as they stood when a candidate was drawn.
#[derive(Clone)]
struct ParamsSnapshot {
    vanilla: HybridParams,
    perturbed: HybridParams,
    ind_adv: HybridParams,
}

fn combined_digest(a: &HybridParams, b: &HybridParams, c: &HybridParams) -> String {
    let mut h = crate::digest::Hasher::new();
    for p in [a, b, c] {
        h.update(&p.digest().to_le_bytes());
    }
    h.finish_hex()
}

/// Search for one compliant vanilla/perturbed pair.
///
/// Three sibling parameter vectors (vanilla, perturbed, independent
/// adversary) start from the same prior. Each iteration draws `N` candidate
/// triples, simulates both adversary paths against the shared independent
/// adversary path, scores the pair (lower is better), selects the lowest
/// `ceil(rho*N)` as the elite, and refits each parameter vector from its
/// own elite component with smoothing. The search stops as soon as the pair
/// at the gamma boundary satisfies every rigid constraint with a negative
/// score; the best compliant pair seen is returned.
pub fn hybrid_pair_search(
    cfg: &CeConfig,
    scenario: &ScenarioConfig,
    cost_cfg: &CostConfig,
    stats: &DatasetStats,
    initial: &HybridParams,
    weight_cfg: &ImportanceWeightConfig,
) -> Result<(PairCandidate, PairSearchState)> {
    cfg.validate()?;
    scenario.validate()?;
    weight_cfg.validate()?;
    if initial.horizon() != scenario.path_steps {
        return Err(Error::InvalidParameter {
            name: "initial params".into(),
            reason: format!(
                "prior horizon {} does not match scenario path_steps {}",
                initial.horizon(),
                scenario.path_steps
            ),
        });
    }

    let mut vanilla = initial.clone();
    let mut perturbed = initial.clone();
    let mut ind_adv = initial.clone();
    let scripted = scenario.ind_adv_behavior.scripted_path();
    let step_duration = scenario.step_duration();

    let mut best: Option<(ScoredCandidate, ParamsSnapshot)> = None;
    let mut history = Vec::new();
    let mut restarts = 0usize;
    let mut stalled_iterations = 0usize;

    for iteration in 0..cfg.max_iterations {
        let snapshot = ParamsSnapshot {
            vanilla: vanilla.clone(),
            perturbed: perturbed.clone(),
            ind_adv: ind_adv.clone(),
        };
        let triples: Vec<(HybridPath, HybridPath, HybridPath)> = (0..cfg.batch_size)
            .map(|k| {
                let it = iteration as u64;
                let kk = k as u64;
                let v = hybrid::sample_path(&vanilla, derive_seed(cfg.seed, &[it, kk, 0]));
                let p = hybrid::sample_path(&perturbed, derive_seed(cfg.seed, &[it, kk, 1]));
                let i = scripted
                    .clone()
                    .unwrap_or_else(|| hybrid::sample_path(&ind_adv, derive_seed(cfg.seed, &[it, kk, 2])));
                (v, p, i)
            })
            .collect();

        let scored: Vec<Result<ScoredCandidate>> = triples
            .par_iter()
            .map(|(v, p, i)| {
                let vanilla_trace = run_scenario(scenario, v, i)?;
                let perturbed_trace = run_scenario(scenario, p, i)?;
                let pair = PairCandidate {
                    vanilla: SimulatedPath {
                        path: v.clone(),
                        trace: vanilla_trace,
                    },
                    perturbed: SimulatedPath {
                        path: p.clone(),
                        trace: perturbed_trace,
                    },
                    step_duration,
                };
                let score = cost::total_cost(&pair, stats, cost_cfg);
                Ok(ScoredCandidate {
                    score,
                    pair,
                    ind_path: i.clone(),
                })
            })
            .collect();
        let mut candidates = Vec::with_capacity(scored.len());
        for c in scored {
            candidates.push(c?);
        }

        let mut valid: Vec<usize> = (0..candidates.len())
            .filter(|&i| candidates[i].score.is_finite())
            .collect();
        if valid.is_empty() {
            return Err(Error::DegenerateObjective);
        }

        // In likelihood-ratio mode, candidates whose paths are unsupported
        // under the current parameters drop out of the elite pool.
        if weight_cfg.mode == hybrid::WeightMode::LikelihoodRatio {
            valid.retain(|&i| {
                let c = &candidates[i];
                hybrid::importance_weight(&c.pair.vanilla.path, weight_cfg, &vanilla).is_ok()
                    && hybrid::importance_weight(&c.pair.perturbed.path, weight_cfg, &perturbed)
                        .is_ok()
            });
            if valid.is_empty() {
                return Err(Error::DegenerateObjective);
            }
        }

        let valid_scores: Vec<f64> = valid.iter().map(|&i| candidates[i].score).collect();
        let effective_rho = (cfg.elite_count() as f64 / valid.len() as f64).min(1.0);
        let (gamma, elite_pos) = elite_select(&valid_scores, effective_rho, Orientation::Minimize);
        let elite_idx: Vec<usize> = elite_pos.iter().map(|&p| valid[p]).collect();
        let gamma_candidate = &candidates[*elite_idx.last().expect("non-empty elite")];

        for &i in &elite_idx {
            let c = &candidates[i];
            let compliant =
                cost::rigid_constraints(&c.pair, cost_cfg.pair_threshold, cost_cfg.penalty) == 0.0;
            if compliant && best.as_ref().is_none_or(|(b, _)| c.score < b.score) {
                best = Some((
                    ScoredCandidate {
                        score: c.score,
                        pair: c.pair.clone(),
                        ind_path: c.ind_path.clone(),
                    },
                    snapshot.clone(),
                ));
            }
        }

        let weight_for = |path: &HybridPath, params: &HybridParams| -> f64 {
            hybrid::importance_weight(path, weight_cfg, params).unwrap_or(0.0)
        };
        let vanilla_elite: Vec<&HybridPath> =
            elite_idx.iter().map(|&i| &candidates[i].pair.vanilla.path).collect();
        let vanilla_weights: Vec<f64> = vanilla_elite.iter().map(|p| weight_for(p, &vanilla)).collect();
        let perturbed_elite: Vec<&HybridPath> =
            elite_idx.iter().map(|&i| &candidates[i].pair.perturbed.path).collect();
        let perturbed_weights: Vec<f64> =
            perturbed_elite.iter().map(|p| weight_for(p, &perturbed)).collect();

        vanilla = vanilla.update(&vanilla_elite, &vanilla_weights)?.blend(&vanilla, cfg.smoothing)?;
        perturbed = perturbed
            .update(&perturbed_elite, &perturbed_weights)?
            .blend(&perturbed, cfg.smoothing)?;
        if scripted.is_none() {
            let ind_elite: Vec<&HybridPath> =
                elite_idx.iter().map(|&i| &candidates[i].ind_path).collect();
            let ind_weights: Vec<f64> = ind_elite.iter().map(|p| weight_for(p, &ind_adv)).collect();
            ind_adv = ind_adv.update(&ind_elite, &ind_weights)?.blend(&ind_adv, cfg.smoothing)?;
        }

        let best_iter_score = valid_scores.iter().cloned().fold(f64::INFINITY, f64::min);
        history.push(IterationReport {
            iteration,
            gamma,
            best_score: best_iter_score,
            elite_size: elite_idx.len(),
            params_digest: combined_digest(&vanilla, &perturbed, &ind_adv),
        });

        let gamma_compliant = cost::rigid_constraints(
            &gamma_candidate.pair,
            cost_cfg.pair_threshold,
            cost_cfg.penalty,
        ) == 0.0;
        if gamma_compliant && gamma < 0.0 {
            break;
        }

        // Any rigid violation puts a score within soft-term range of the
        // penalty; half of it cleanly separates violated from compliant.
        if best.is_none() && gamma >= cost_cfg.penalty / 2.0 {
            stalled_iterations += 1;
            if stalled_iterations >= RESTART_STALL {
                vanilla = initial.clone();
                perturbed = initial.clone();
                ind_adv = initial.clone();
                restarts += 1;
                stalled_iterations = 0;
            }
        } else {
            stalled_iterations = 0;
        }
    }

    let iterations = history.len();
    match best {
        Some((found, snapshot)) => {
            debug_assert_eq!(
                cost::rigid_constraints(&found.pair, cost_cfg.pair_threshold, cost_cfg.penalty),
                0.0
            );
            let state = PairSearchState {
                vanilla_params: snapshot.vanilla,
                perturbed_params: snapshot.perturbed,
                ind_adv_params: snapshot.ind_adv,
                final_vanilla_params: vanilla,
                final_perturbed_params: perturbed,
                final_ind_adv_params: ind_adv,
                archive_stats: stats.clone(),
                history,
                ind_adv_path: found.ind_path,
                restarts,
            };
            Ok((found.pair, state))
        }
        None => Err(Error::SearchExhausted {
            iterations,
            history,
        }),
    }
}
