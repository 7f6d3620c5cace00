//! The five-factor pair cost: categorical length, Gaussian speed validity,
//! vanilla/perturbed closeness, archive-variance steering, and rigid
//! constraints.
//!
//! Lower scores are better; a negative score is only reachable when every
//! rigid constraint holds, so the sign of a score doubles as a compliance
//! flag for the search.

use serde::{Deserialize, Serialize};

use crate::hybrid::{HybridPath, Move};
use crate::sim::{SimTrace, SPEED_MAX};

/// Offset added to the pair distance before taking the reciprocal, so that
/// identical pairs score a finite `-1/EPS`.
pub const PAIR_DISTANCE_EPS: f64 = 0.1;
/// Offset added to the class standard deviation in the variance term.
pub const VARIANCE_EPS: f64 = 0.1;
/// Acceleration difference normalizer (m/s²) in the pair distance.
pub const ACCEL_NORM: f64 = 10.0;
/// Default per-violation rigid-constraint penalty.
pub const DEFAULT_PENALTY: f64 = 1e9;
/// Default maximum raw pair distance for a compliant pair.
pub const DEFAULT_PAIR_THRESHOLD: f64 = 2.0;

/// Non-negative weights for the four soft cost factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    #[serde(rename = "alpha1")]
    pub a1: f64,
    #[serde(rename = "alpha2")]
    pub a2: f64,
    #[serde(rename = "alpha3")]
    pub a3: f64,
    #[serde(rename = "alpha4")]
    pub a4: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            a1: 3.0,
            a2: 2.0,
            a3: 2.0,
            a4: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> crate::error::Result<()> {
        for (name, w) in [("alpha1", self.a1), ("alpha2", self.a2), ("alpha3", self.a3), ("alpha4", self.a4)] {
            if !w.is_finite() || w < 0.0 {
                return Err(crate::error::Error::InvalidParameter {
                    name: name.into(),
                    reason: format!("{w} must be finite and non-negative"),
                });
            }
        }
        Ok(())
    }
}

/// Cost-side knobs read from the run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    #[serde(flatten)]
    pub weights: CostWeights,
    pub pair_threshold: f64,
    pub penalty: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            pair_threshold: DEFAULT_PAIR_THRESHOLD,
            penalty: DEFAULT_PENALTY,
        }
    }
}

/// Mean and standard deviation of one scalar over one archive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMoments {
    pub mean: f64,
    pub std: f64,
}

/// Archive statistics steering the variance term: one `(mean, std)` pair per
/// (class, scalar) combination, present only once the archive holds at least
/// two paths of that class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub vanilla_location: Option<ClassMoments>,
    pub vanilla_accel: Option<ClassMoments>,
    pub perturbed_location: Option<ClassMoments>,
    pub perturbed_accel: Option<ClassMoments>,
}

impl DatasetStats {
    pub fn empty() -> Self {
        Self::default()
    }
}

/// A path together with its simulated trace.
#[derive(Debug, Clone)]
pub struct SimulatedPath {
    pub path: HybridPath,
    pub trace: SimTrace,
}

/// One vanilla/perturbed candidate pair sharing a scenario.
#[derive(Debug, Clone)]
pub struct PairCandidate {
    pub vanilla: SimulatedPath,
    pub perturbed: SimulatedPath,
    /// Duration of one path step (s), shared by both traces.
    pub step_duration: f64,
}

/// Normalized traveled grid distance: the fraction of non-`Stay` moves.
pub fn categorical_cost(path: &HybridPath) -> f64 {
    let moving = path
        .moves
        .iter()
        .filter(|&&m| m != Move::Stay.index())
        .count();
    moving as f64 / path.horizon() as f64
}

/// Mean positive part of the *negated raw* speed, normalized by the speed
/// clamp. The raw speed integrates the path's accelerations from the trace's
/// initial speed without clamping; the cost is zero iff that integral never
/// goes negative.
pub fn gaussian_cost(path: &HybridPath, trace: &SimTrace, step_duration: f64) -> f64 {
    let dt = trace.timestep;
    let mut speed = {
        let v = trace.samples[0].adv.velocity;
        (v[0] * v[0] + v[1] * v[1]).sqrt()
    };
    let n_steps = (path.horizon() as f64 * step_duration / dt).round() as usize;
    let mut shortfall = 0.0;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let idx = ((t / step_duration).floor() as usize).min(path.horizon() - 1);
        speed += path.accels[idx] * dt;
        shortfall += (-speed).max(0.0);
    }
    shortfall / n_steps as f64 / SPEED_MAX
}

/// Mean per-step Euclidean distance between the two paths' cumulative cell
/// offsets, plus mean absolute acceleration difference normalized by
/// `ACCEL_NORM`. This is the raw distance the rigid threshold applies to.
pub fn raw_pair_distance(a: &HybridPath, b: &HybridPath) -> f64 {
    let t = a.horizon().min(b.horizon());
    let oa = a.cumulative_offsets();
    let ob = b.cumulative_offsets();
    let mut d_loc = 0.0;
    let mut d_acc = 0.0;
    for i in 0..t {
        let dx = (oa[i].0 - ob[i].0) as f64;
        let dy = (oa[i].1 - ob[i].1) as f64;
        d_loc += (dx * dx + dy * dy).sqrt();
        d_acc += (a.accels[i] - b.accels[i]).abs();
    }
    d_loc / t as f64 + d_acc / t as f64 / ACCEL_NORM
}

/// Reciprocal pair-closeness reward: `-1 / (EPS + raw distance)`. Closer
/// pairs score more negative (better).
pub fn pair_distance(pair: &PairCandidate) -> f64 {
    -1.0 / (PAIR_DISTANCE_EPS + raw_pair_distance(&pair.vanilla.path, &pair.perturbed.path))
}

/// Scalar summaries of one path: mean signed lateral cell offset from the
/// start lane, and mean acceleration.
pub fn path_scalars(path: &HybridPath) -> (f64, f64) {
    let t = path.horizon() as f64;
    let chi_location = path
        .cumulative_offsets()
        .iter()
        .map(|&(_, dy)| dy as f64)
        .sum::<f64>()
        / t;
    let chi_acceleration = path.accels.iter().sum::<f64>() / t;
    (chi_location, chi_acceleration)
}

fn shell_distance(chi: f64, m: &ClassMoments) -> f64 {
    let hi = (chi - (m.mean + 2.0 * m.std)).abs();
    let lo = (chi - (m.mean - 2.0 * m.std)).abs();
    hi.min(lo) / (m.std + VARIANCE_EPS)
}

/// Distance of the candidate's scalars from the archive's 2-sigma shell,
/// averaged over the (class, scalar) combinations with defined statistics.
/// Zero on a cold archive.
pub fn variance_cost(pair: &PairCandidate, stats: &DatasetStats) -> f64 {
    let (v_loc, v_acc) = path_scalars(&pair.vanilla.path);
    let (p_loc, p_acc) = path_scalars(&pair.perturbed.path);
    let combos = [
        (v_loc, &stats.vanilla_location),
        (v_acc, &stats.vanilla_accel),
        (p_loc, &stats.perturbed_location),
        (p_acc, &stats.perturbed_accel),
    ];
    let mut sum = 0.0;
    let mut n = 0usize;
    for (chi, m) in combos {
        if let Some(m) = m {
            sum += shell_distance(chi, m);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Count of violated rigid constraints times the penalty. The constraints:
/// the vanilla trace must not collide, the perturbed trace must collide,
/// neither trace may leave the road, and the raw pair distance must be at
/// most `pair_threshold`.
pub fn rigid_constraints(pair: &PairCandidate, pair_threshold: f64, penalty: f64) -> f64 {
    let mut violations = 0u32;
    if pair.vanilla.trace.collision {
        violations += 1;
    }
    if !pair.perturbed.trace.collision {
        violations += 1;
    }
    if pair.vanilla.trace.off_road || pair.perturbed.trace.off_road {
        violations += 1;
    }
    if raw_pair_distance(&pair.vanilla.path, &pair.perturbed.path) > pair_threshold {
        violations += 1;
    }
    violations as f64 * penalty
}

/// Combine the five factors. Pair-level categorical and Gaussian costs are
/// the average of the two paths' costs.
pub fn combine(c: f64, g: f64, d: f64, v: f64, r: f64, w: &CostWeights) -> f64 {
    w.a1 * c + w.a2 * g + w.a3 * d + w.a4 * v + r
}

/// Full weighted pair score. Negative only when every rigid constraint
/// holds and the closeness reward outweighs the soft costs.
pub fn total_cost(pair: &PairCandidate, stats: &DatasetStats, cfg: &CostConfig) -> f64 {
    let c = (categorical_cost(&pair.vanilla.path) + categorical_cost(&pair.perturbed.path)) / 2.0;
    let g = (gaussian_cost(&pair.vanilla.path, &pair.vanilla.trace, pair.step_duration)
        + gaussian_cost(&pair.perturbed.path, &pair.perturbed.trace, pair.step_duration))
        / 2.0;
    let d = pair_distance(pair);
    let v = variance_cost(pair, stats);
    let r = rigid_constraints(pair, cfg.pair_threshold, cfg.penalty);
    combine(c, g, d, v, r, &cfg.weights)
}
