//! The hybrid sampling distribution: a per-step categorical over grid moves
//! joined with a per-step Gaussian over longitudinal acceleration.
//!
//! One `HybridParams` is the full parameter vector for one adversary: `T`
//! categorical steps and `T` Gaussian steps. Sampling yields a `HybridPath`
//! (a move index and an acceleration per step); elite-set updates move the
//! parameters toward the elite's empirical moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of relative grid moves in the alphabet.
pub const MOVE_COUNT: usize = 6;

/// Variance floor (m/s²)² applied after every update so the Gaussian part
/// can never collapse to a point mass.
pub const VAR_FLOOR: f64 = 1e-4;

/// Relative grid move for one path step. Lateral offsets are in half-lane
/// cells; `+y` is to the left of the direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Move {
    Stay,
    Forward,
    ForwardLeft,
    ForwardRight,
    Left,
    Right,
}

impl Move {
    pub const ALL: [Move; MOVE_COUNT] = [
        Move::Stay,
        Move::Forward,
        Move::ForwardLeft,
        Move::ForwardRight,
        Move::Left,
        Move::Right,
    ];

    pub fn index(self) -> usize {
        match self {
            Move::Stay => 0,
            Move::Forward => 1,
            Move::ForwardLeft => 2,
            Move::ForwardRight => 3,
            Move::Left => 4,
            Move::Right => 5,
        }
    }

    pub fn from_index(i: usize) -> Option<Move> {
        Move::ALL.get(i).copied()
    }

    /// (forward cells, lateral cells) offset of this move.
    pub fn offset(self) -> (i64, i64) {
        match self {
            Move::Stay => (0, 0),
            Move::Forward => (1, 0),
            Move::ForwardLeft => (1, 1),
            Move::ForwardRight => (1, -1),
            Move::Left => (0, 1),
            Move::Right => (0, -1),
        }
    }
}

/// Probability vector over the move alphabet for one path step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalStep {
    probs: Vec<f64>,
}

impl CategoricalStep {
    /// Validates non-negativity and normalization (sum within 1e-9 of 1).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidParameter {
                name: "probs".into(),
                reason: "empty probability vector".into(),
            });
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidParameter {
                    name: "probs".into(),
                    reason: format!("entry {p} is negative or non-finite"),
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter {
                name: "probs".into(),
                reason: format!("entries sum to {sum}, expected 1 within 1e-9"),
            });
        }
        Ok(Self { probs })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            probs: vec![1.0 / m as f64; m],
        }
    }

    pub fn one_hot(m: usize, hot: usize) -> Self {
        let mut probs = vec![0.0; m];
        probs[hot] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn arity(&self) -> usize {
        self.probs.len()
    }
}

/// Acceleration distribution for one path step: N(mean, var) in m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianStep {
    pub mean: f64,
    pub var: f64,
}

impl GaussianStep {
    /// Clamps the variance to `VAR_FLOOR`; rejects non-finite parameters.
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !mean.is_finite() || !var.is_finite() || var < 0.0 {
            return Err(Error::InvalidParameter {
                name: "gaussian".into(),
                reason: format!("mean {mean}, var {var} must be finite with var >= 0"),
            });
        }
        Ok(Self {
            mean,
            var: var.max(VAR_FLOOR),
        })
    }
}

/// Full parameter vector for one adversary: `T` categorical steps plus `T`
/// Gaussian steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridParams {
    cat: Vec<CategoricalStep>,
    gauss: Vec<GaussianStep>,
}

impl HybridParams {
    pub fn new(cat: Vec<CategoricalStep>, gauss: Vec<GaussianStep>) -> Result<Self> {
        if cat.len() != gauss.len() || cat.is_empty() {
            return Err(Error::InvalidParameter {
                name: "params".into(),
                reason: format!(
                    "categorical ({}) and gaussian ({}) step counts must match and be non-zero",
                    cat.len(),
                    gauss.len()
                ),
            });
        }
        let m = cat[0].arity();
        if cat.iter().any(|c| c.arity() != m) {
            return Err(Error::InvalidParameter {
                name: "params".into(),
                reason: "all categorical steps must share one move alphabet".into(),
            });
        }
        Ok(Self { cat, gauss })
    }

    /// Horizon in path steps.
    pub fn horizon(&self) -> usize {
        self.cat.len()
    }

    /// Size of the move alphabet.
    pub fn arity(&self) -> usize {
        self.cat[0].arity()
    }

    pub fn categorical(&self) -> &[CategoricalStep] {
        &self.cat
    }

    pub fn gaussian(&self) -> &[GaussianStep] {
        &self.gauss
    }

    /// Stable content digest of the parameter vector.
    pub fn digest(&self) -> u64 {
        let bytes = serde_json::to_vec(&self.to_record()).expect("params serialize");
        crate::digest::fnv1a64(&bytes)
    }

    fn to_record(&self) -> ParamsRecord {
        ParamsRecord {
            horizon: self.horizon(),
            moves: self.arity(),
            cat: self.cat.iter().map(|c| c.probs().to_vec()).collect(),
            gauss: self.gauss.iter().map(|g| vec![g.mean, g.var]).collect(),
        }
    }

    /// One line of the line-delimited params format (one object per adversary).
    pub fn to_jsonl_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("params serialize")
    }

    pub fn from_jsonl_line(line: &str) -> Result<Self> {
        let rec: ParamsRecord = serde_json::from_str(line)?;
        if rec.cat.len() != rec.horizon || rec.gauss.len() != rec.horizon {
            return Err(Error::Malformed {
                what: "params record".into(),
                detail: format!(
                    "horizon {} does not match cat ({}) / gauss ({}) rows",
                    rec.horizon,
                    rec.cat.len(),
                    rec.gauss.len()
                ),
            });
        }
        let cat = rec
            .cat
            .into_iter()
            .map(|row| {
                if row.len() != rec.moves {
                    return Err(Error::Malformed {
                        what: "params record".into(),
                        detail: format!("cat row has {} entries, expected {}", row.len(), rec.moves),
                    });
                }
                CategoricalStep::new(row)
            })
            .collect::<Result<Vec<_>>>()?;
        let gauss = rec
            .gauss
            .into_iter()
            .map(|row| {
                if row.len() != 2 {
                    return Err(Error::Malformed {
                        what: "params record".into(),
                        detail: "gauss row must be [mean, var]".into(),
                    });
                }
                GaussianStep::new(row[0], row[1])
            })
            .collect::<Result<Vec<_>>>()?;
        HybridParams::new(cat, gauss)
    }
}

/// Wire format for `HybridParams`: `horizon`, `moves`, a T×M `cat` matrix and
/// a T×2 `gauss` matrix.
#[derive(Debug, Serialize, Deserialize)]
struct ParamsRecord {
    horizon: usize,
    moves: usize,
    cat: Vec<Vec<f64>>,
    gauss: Vec<Vec<f64>>,
}

/// One sampled adversary path: a move index and an acceleration per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridPath {
    pub moves: Vec<usize>,
    pub accels: Vec<f64>,
}

impl HybridPath {
    pub fn new(moves: Vec<usize>, accels: Vec<f64>) -> Result<Self> {
        if moves.len() != accels.len() || moves.is_empty() {
            return Err(Error::InvalidParameter {
                name: "path".into(),
                reason: "moves and accels must have equal non-zero length".into(),
            });
        }
        Ok(Self { moves, accels })
    }

    pub fn horizon(&self) -> usize {
        self.moves.len()
    }

    /// Cumulative (forward, lateral) cell offset after each step, starting
    /// from the offset after step 0.
    pub fn cumulative_offsets(&self) -> Vec<(i64, i64)> {
        let mut out = Vec::with_capacity(self.moves.len());
        let (mut fx, mut fy) = (0i64, 0i64);
        for &m in &self.moves {
            let (dx, dy) = Move::from_index(m).expect("move index in range").offset();
            fx += dx;
            fy += dy;
            out.push((fx, fy));
        }
        out
    }
}

/// How elite paths are weighted during parameter updates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// W = 1 for every path; the optimization-flavored update.
    #[default]
    Unit,
    /// W = f(path; reference) / f(path; current); the rare-event flavored
    /// update, requiring the original (reference) parameters.
    LikelihoodRatio,
}

/// Importance-weight configuration; `LikelihoodRatio` requires `reference`.
#[derive(Debug, Clone, Default)]
pub struct ImportanceWeightConfig {
    pub mode: WeightMode,
    pub reference: Option<HybridParams>,
}

impl ImportanceWeightConfig {
    pub fn unit() -> Self {
        Self::default()
    }

    pub fn likelihood_ratio(reference: HybridParams) -> Self {
        Self {
            mode: WeightMode::LikelihoodRatio,
            reference: Some(reference),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == WeightMode::LikelihoodRatio && self.reference.is_none() {
            return Err(Error::InvalidParameter {
                name: "importance_weight".into(),
                reason: "likelihood-ratio mode requires a reference distribution".into(),
            });
        }
        Ok(())
    }
}

/// Draw one path. A pure function of `(params, seed)`.
pub fn sample_path(params: &HybridParams, seed: u64) -> HybridPath {
    let mut rng = rng::rng_from_seed(seed);
    let t = params.horizon();
    let mut moves = Vec::with_capacity(t);
    let mut accels = Vec::with_capacity(t);
    for step in 0..t {
        moves.push(rng::categorical(&mut rng, params.cat[step].probs()));
        let g = params.gauss[step];
        accels.push(rng::normal(&mut rng, g.mean, g.var));
    }
    HybridPath { moves, accels }
}

fn check_elite<'a>(elite: &'a [&HybridPath], weights: &[f64]) -> Result<(usize, &'a [&'a HybridPath])> {
    if elite.is_empty() {
        return Err(Error::EmptyElite);
    }
    if elite.len() != weights.len() {
        return Err(Error::InvalidParameter {
            name: "weights".into(),
            reason: format!("{} weights for {} elite paths", weights.len(), elite.len()),
        });
    }
    let t = elite[0].horizon();
    if elite.iter().any(|p| p.horizon() != t) {
        return Err(Error::InvalidParameter {
            name: "elite".into(),
            reason: "elite paths must share one horizon".into(),
        });
    }
    Ok((t, elite))
}

/// Per-step categorical update: the weighted fraction of elite paths taking
/// each move, normalized by the total weight.
pub fn update_categorical(
    elite: &[&HybridPath],
    weights: &[f64],
    arity: usize,
) -> Result<Vec<CategoricalStep>> {
    let (t, elite) = check_elite(elite, weights)?;
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "weights".into(),
            reason: "weights must sum to a positive value".into(),
        });
    }
    let mut steps = Vec::with_capacity(t);
    for step in 0..t {
        let mut counts = vec![0.0; arity];
        for (path, &w) in elite.iter().zip(weights) {
            counts[path.moves[step]] += w;
        }
        for c in &mut counts {
            *c /= total;
        }
        steps.push(CategoricalStep::new(normalize_exact(counts))?);
    }
    Ok(steps)
}

/// Per-step Gaussian update: weighted mean and weighted second central
/// moment of the elite accelerations, with the variance floored.
pub fn update_gaussian(elite: &[&HybridPath], weights: &[f64]) -> Result<Vec<GaussianStep>> {
    let (t, elite) = check_elite(elite, weights)?;
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "weights".into(),
            reason: "weights must sum to a positive value".into(),
        });
    }
    let mut steps = Vec::with_capacity(t);
    for step in 0..t {
        let mean = elite
            .iter()
            .zip(weights)
            .map(|(p, &w)| w * p.accels[step])
            .sum::<f64>()
            / total;
        let var = elite
            .iter()
            .zip(weights)
            .map(|(p, &w)| {
                let d = p.accels[step] - mean;
                w * d * d
            })
            .sum::<f64>()
            / total;
        steps.push(GaussianStep::new(mean, var)?);
    }
    Ok(steps)
}

/// Guard against drift: rescale so the entries sum to exactly 1.
fn normalize_exact(mut probs: Vec<f64>) -> Vec<f64> {
    let sum: f64 = probs.iter().sum();
    if sum > 0.0 {
        for p in &mut probs {
            *p /= sum;
        }
    }
    probs
}

/// Blend `alpha * new + (1 - alpha) * old` elementwise over every
/// categorical probability and every Gaussian mean/variance.
pub fn smooth(new: &HybridParams, old: &HybridParams, alpha: f64) -> Result<HybridParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if new.horizon() != old.horizon() || new.arity() != old.arity() {
        return Err(Error::InvalidParameter {
            name: "smooth".into(),
            reason: "parameter vectors must share horizon and move alphabet".into(),
        });
    }
    let cat = new
        .cat
        .iter()
        .zip(&old.cat)
        .map(|(n, o)| {
            let probs: Vec<f64> = n
                .probs()
                .iter()
                .zip(o.probs())
                .map(|(&pn, &po)| alpha * pn + (1.0 - alpha) * po)
                .collect();
            CategoricalStep::new(normalize_exact(probs))
        })
        .collect::<Result<Vec<_>>>()?;
    let gauss = new
        .gauss
        .iter()
        .zip(&old.gauss)
        .map(|(n, o)| {
            GaussianStep::new(
                alpha * n.mean + (1.0 - alpha) * o.mean,
                alpha * n.var + (1.0 - alpha) * o.var,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    HybridParams::new(cat, gauss)
}

/// Log density of a path under a parameter vector; `-inf` when any move has
/// zero probability.
pub fn log_density(path: &HybridPath, params: &HybridParams) -> f64 {
    let mut lp = 0.0;
    for step in 0..path.horizon() {
        let p = params.cat[step].probs()[path.moves[step]];
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        lp += p.ln();
        let g = params.gauss[step];
        let d = path.accels[step] - g.mean;
        lp += -0.5 * ((2.0 * std::f64::consts::PI * g.var).ln() + d * d / g.var);
    }
    lp
}

/// Importance weight of a path. Unit mode returns 1; likelihood-ratio mode
/// returns `f(path; reference) / f(path; current)` computed in log space.
/// Paths with zero density under the current parameters (or a vanishing
/// ratio) are unsupported and must be excluded from the elite.
pub fn importance_weight(
    path: &HybridPath,
    cfg: &ImportanceWeightConfig,
    current: &HybridParams,
) -> Result<f64> {
    cfg.validate()?;
    match cfg.mode {
        WeightMode::Unit => Ok(1.0),
        WeightMode::LikelihoodRatio => {
            let reference = cfg.reference.as_ref().expect("validated");
            let lc = log_density(path, current);
            if lc == f64::NEG_INFINITY {
                return Err(Error::UnsupportedPath);
            }
            let lr = log_density(path, reference);
            let w = (lr - lc).exp();
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::UnsupportedPath);
            }
            Ok(w)
        }
    }
}
