//! The labeled path archive: core vanilla/perturbed pairs from the search,
//! variant pairs resampled from each pair's converged distributions, and
//! rudimentary paths from the un-updated prior.
//!
//! Archive statistics (the mean and spread of the location/acceleration
//! scalars per core class) are maintained incrementally and feed the
//! variance term of the next search, steering it away from already-covered
//! behavior. Only core records contribute to the statistics; helpers are
//! derived from core distributions and would double-count them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{self, ClassMoments, DatasetStats};
use crate::digest::{hex_digest, Hasher};
use crate::engine::{self, CeConfig};
use crate::error::{Error, Result};
use crate::hybrid::{self, HybridParams, HybridPath, ImportanceWeightConfig};
use crate::rng::derive_labeled;
use crate::sim::{run_scenario, ScenarioConfig, SimTrace};

/// Path taxonomy. Core kinds come straight out of the pair search; helper
/// kinds broaden the training distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Vanilla,
    Perturbed,
    VariantVanilla,
    VariantPerturbed,
    Rudimentary,
}

impl PathKind {
    pub const ALL: [PathKind; 5] = [
        PathKind::Vanilla,
        PathKind::Perturbed,
        PathKind::VariantVanilla,
        PathKind::VariantPerturbed,
        PathKind::Rudimentary,
    ];

    /// Class label: 1 for collision kinds, 0 otherwise.
    pub fn label(self) -> u8 {
        match self {
            PathKind::Perturbed | PathKind::VariantPerturbed => 1,
            _ => 0,
        }
    }

    pub fn is_core(self) -> bool {
        matches!(self, PathKind::Vanilla | PathKind::Perturbed)
    }
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PathKind::Vanilla => "vanilla",
            PathKind::Perturbed => "perturbed",
            PathKind::VariantVanilla => "variant-vanilla",
            PathKind::VariantPerturbed => "variant-perturbed",
            PathKind::Rudimentary => "rudimentary",
        };
        f.write_str(s)
    }
}

/// Where a record came from: the seed of the search or draw that produced
/// it, the iteration count it took, and the digest of the generating
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub iteration: usize,
    pub params_digest: String,
}

/// One labeled archive entry.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub id: String,
    pub kind: PathKind,
    pub label: u8,
    pub path: HybridPath,
    pub trace: SimTrace,
    pub pair_id: Option<String>,
    pub provenance: Provenance,
}

impl PathRecord {
    /// Label/kind/outcome consistency, machine-checked on insert and load.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InconsistentRecord {
                id: self.id.clone(),
                reason,
            })
        };
        if self.label != self.kind.label() {
            return fail(format!("label {} does not match kind {}", self.label, self.kind));
        }
        match self.kind {
            PathKind::Perturbed | PathKind::VariantPerturbed => {
                if !self.trace.collision {
                    return fail("collision kind with a non-colliding trace".into());
                }
                if self.trace.t_collision.is_none() {
                    return fail("colliding trace without t_collision".into());
                }
            }
            PathKind::Vanilla | PathKind::VariantVanilla | PathKind::Rudimentary => {
                if self.trace.collision {
                    return fail("non-collision kind with a colliding trace".into());
                }
            }
        }
        Ok(())
    }

    /// Stable digest of the record's content.
    pub fn digest(&self) -> String {
        let mut h = Hasher::new();
        h.update(self.id.as_bytes());
        h.update(self.kind.to_string().as_bytes());
        h.update(&[self.label]);
        h.update(serde_json::to_string(&self.path).expect("path serialize").as_bytes());
        h.update(self.trace.to_csv(self.trace.samples[0].ego.bbox).as_bytes());
        h.finish_hex()
    }
}

/// The converged distributions of one core pair, kept so helper variants
/// can be resampled from exactly what the search settled on.
#[derive(Debug, Clone)]
pub struct PairParams {
    pub vanilla: HybridParams,
    pub perturbed: HybridParams,
    pub ind_adv: HybridParams,
    /// The independent-adversary path the core pair was simulated against;
    /// variants reuse it so the scenario stays comparable.
    pub ind_path: HybridPath,
}

/// Welford accumulator; sample standard deviation (n-1 denominator).
#[derive(Debug, Clone, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn add(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn moments(&self) -> Option<ClassMoments> {
        (self.n >= 2).then(|| ClassMoments {
            mean: self.mean,
            std: (self.m2 / (self.n - 1) as f64).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Default)]
struct StatsAccumulator {
    vanilla_loc: Welford,
    vanilla_acc: Welford,
    perturbed_loc: Welford,
    perturbed_acc: Welford,
}

impl StatsAccumulator {
    fn add(&mut self, kind: PathKind, path: &HybridPath) {
        let (chi_loc, chi_acc) = cost::path_scalars(path);
        match kind {
            PathKind::Vanilla => {
                self.vanilla_loc.add(chi_loc);
                self.vanilla_acc.add(chi_acc);
            }
            PathKind::Perturbed => {
                self.perturbed_loc.add(chi_loc);
                self.perturbed_acc.add(chi_acc);
            }
            _ => {}
        }
    }

    fn snapshot(&self) -> DatasetStats {
        DatasetStats {
            vanilla_location: self.vanilla_loc.moments(),
            vanilla_accel: self.vanilla_acc.moments(),
            perturbed_location: self.perturbed_loc.moments(),
            perturbed_accel: self.perturbed_acc.moments(),
        }
    }
}

/// In-memory archive; single-writer, with value-snapshot reads.
#[derive(Debug, Default)]
pub struct Archive {
    records: Vec<PathRecord>,
    pair_params: BTreeMap<String, PairParams>,
    stats: StatsAccumulator,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: PathRecord) -> Result<()> {
        record.validate()?;
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(Error::InconsistentRecord {
                id: record.id.clone(),
                reason: "duplicate id".into(),
            });
        }
        self.stats.add(record.kind, &record.path);
        self.records.push(record);
        Ok(())
    }

    pub fn insert_pair_params(&mut self, pair_id: &str, params: PairParams) {
        self.pair_params.insert(pair_id.to_string(), params);
    }

    pub fn records(&self) -> &[PathRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&PathRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn pair_params(&self) -> &BTreeMap<String, PairParams> {
        &self.pair_params
    }

    /// Current incremental statistics snapshot.
    pub fn stats(&self) -> DatasetStats {
        self.stats.snapshot()
    }

    /// Two-pass recomputation over core records; the incremental snapshot
    /// must match this within 1e-9.
    pub fn recompute_stats(&self) -> DatasetStats {
        let collect = |kind: PathKind| -> (Vec<f64>, Vec<f64>) {
            let mut locs = Vec::new();
            let mut accs = Vec::new();
            for r in self.records.iter().filter(|r| r.kind == kind) {
                let (l, a) = cost::path_scalars(&r.path);
                locs.push(l);
                accs.push(a);
            }
            (locs, accs)
        };
        let two_pass = |xs: &[f64]| -> Option<ClassMoments> {
            if xs.len() < 2 {
                return None;
            }
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var =
                xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
            Some(ClassMoments {
                mean,
                std: var.sqrt(),
            })
        };
        let (vl, va) = collect(PathKind::Vanilla);
        let (pl, pa) = collect(PathKind::Perturbed);
        DatasetStats {
            vanilla_location: two_pass(&vl),
            vanilla_accel: two_pass(&va),
            perturbed_location: two_pass(&pl),
            perturbed_accel: two_pass(&pa),
        }
    }

    pub fn counts_by_kind(&self) -> BTreeMap<PathKind, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.kind).or_insert(0) += 1;
        }
        counts
    }

    /// Record ids of one kind, ascending.
    pub fn ids_of_kind(&self, kind: PathKind) -> Vec<&str> {
        let mut ids: Vec<&str> = self
            .records
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.id.as_str())
            .collect();
        ids.sort_unstable();
        ids
    }

    /// The collision time of the perturbed sibling in a record's pair, when
    /// the record belongs to one.
    pub fn pair_collision_time(&self, record: &PathRecord) -> Option<f64> {
        let pair_id = record.pair_id.as_deref()?;
        self.records
            .iter()
            .find(|r| r.kind == PathKind::Perturbed && r.pair_id.as_deref() == Some(pair_id))
            .and_then(|r| r.trace.t_collision)
    }

    /// Stable digest over every record, in id order.
    pub fn digest(&self) -> String {
        let mut ordered: Vec<&PathRecord> = self.records.iter().collect();
        ordered.sort_unstable_by(|a, b| a.id.cmp(&b.id));
        let mut h = Hasher::new();
        for r in ordered {
            h.update(r.digest().as_bytes());
        }
        h.finish_hex()
    }
}

// ── generation ────────────────────────────────────────────────────────────

/// Outcome of a `generate_core` run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CoreGenReport {
    pub requested: usize,
    pub completed: usize,
    /// One warning per failed search.
    pub warnings: Vec<String>,
    /// Iterations each successful search took.
    pub iterations: Vec<usize>,
    /// Raw pair distance of each accepted pair.
    pub pair_distances: Vec<f64>,
    /// Per-pair search histories, for the line-delimited export.
    #[serde(skip)]
    pub histories: Vec<(String, Vec<crate::engine::IterationReport>)>,
}

/// Run the pair search `count` times, inserting both records of each
/// compliant pair and refreshing the statistics between searches so the
/// variance term steers the next one. Failed searches are skipped with a
/// warning; the report carries the achieved count.
pub fn generate_core(
    archive: &mut Archive,
    count: usize,
    cfg: &CeConfig,
    scenario: &ScenarioConfig,
    cost_cfg: &cost::CostConfig,
    weight_cfg: &ImportanceWeightConfig,
) -> Result<CoreGenReport> {
    let mut report = CoreGenReport {
        requested: count,
        ..Default::default()
    };
    let prior = engine::driving_prior(scenario.path_steps);
    let existing_pairs = archive.pair_params.len();

    for i in 0..count {
        let search_seed = derive_labeled(cfg.seed, "core-search", (existing_pairs + i) as u64);
        let search_cfg = CeConfig {
            seed: search_seed,
            ..cfg.clone()
        };
        let stats = archive.stats();
        match engine::hybrid_pair_search(&search_cfg, scenario, cost_cfg, &stats, &prior, weight_cfg)
        {
            Ok((pair, state)) => {
                let pair_seq = archive.pair_params.len();
                let pair_id = format!("pair-{pair_seq:04}");
                let iterations = state.history.len();
                report.iterations.push(iterations);
                report
                    .pair_distances
                    .push(cost::raw_pair_distance(&pair.vanilla.path, &pair.perturbed.path));

                let vanilla_record = PathRecord {
                    id: format!("{pair_id}-vanilla"),
                    kind: PathKind::Vanilla,
                    label: 0,
                    path: pair.vanilla.path,
                    trace: pair.vanilla.trace,
                    pair_id: Some(pair_id.clone()),
                    provenance: Provenance {
                        seed: search_seed,
                        iteration: iterations,
                        params_digest: format!("{:016x}", state.vanilla_params.digest()),
                    },
                };
                let perturbed_record = PathRecord {
                    id: format!("{pair_id}-perturbed"),
                    kind: PathKind::Perturbed,
                    label: 1,
                    path: pair.perturbed.path,
                    trace: pair.perturbed.trace,
                    pair_id: Some(pair_id.clone()),
                    provenance: Provenance {
                        seed: search_seed,
                        iteration: iterations,
                        params_digest: format!("{:016x}", state.perturbed_params.digest()),
                    },
                };
                archive.insert(vanilla_record)?;
                archive.insert(perturbed_record)?;
                archive.insert_pair_params(
                    &pair_id,
                    PairParams {
                        vanilla: state.vanilla_params,
                        perturbed: state.perturbed_params,
                        ind_adv: state.ind_adv_params,
                        ind_path: state.ind_adv_path,
                    },
                );
                report.histories.push((pair_id, state.history));
                report.completed += 1;
            }
            Err(Error::SearchExhausted { iterations, .. }) => {
                report.warnings.push(format!(
                    "search {i} (seed {search_seed}) exhausted after {iterations} iterations; skipped"
                ));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Outcome of a `generate_variants` run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct VariantGenReport {
    pub kept_vanilla: usize,
    pub kept_perturbed: usize,
    /// Pair/kind combinations whose draw budget ran out before the target.
    pub budget_exhausted: usize,
}

/// Rejection-sampling budget per pair, split evenly across the pair's two
/// distributions.
const VARIANT_DRAW_BUDGET: usize = 500;

/// Resample each core pair's converged distributions, keeping draws whose
/// raw distance to the core counterpart lies in `[band.0, band.1)` with the
/// label-consistent outcome (and on the road).
///
/// Draws come from both distributions of the pair; each kept sample is
/// classified by its simulated outcome, exactly like the dataset labels
/// records. A vanilla-distribution draw that happens to collide therefore
/// becomes a variant-perturbed (its counterpart being the core perturbed
/// path), and vice versa. This is what puts variants on the far side of the
/// boundary from their origin: behavior from the converged region whose
/// outcome flipped or drifted.
pub fn generate_variants(
    archive: &mut Archive,
    per_pair: usize,
    band: (f64, f64),
    scenario: &ScenarioConfig,
    seed: u64,
) -> Result<VariantGenReport> {
    let mut report = VariantGenReport::default();
    let pairs: Vec<(String, PairParams)> = archive
        .pair_params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    for (pair_idx, (pair_id, params)) in pairs.iter().enumerate() {
        let core_vanilla = archive
            .get(&format!("{pair_id}-vanilla"))
            .ok_or_else(|| Error::MissingArtifact(format!("{pair_id}-vanilla")))?
            .path
            .clone();
        let core_perturbed = archive
            .get(&format!("{pair_id}-perturbed"))
            .ok_or_else(|| Error::MissingArtifact(format!("{pair_id}-perturbed")))?
            .path
            .clone();

        let mut kept_vanilla = 0usize;
        let mut kept_perturbed = 0usize;
        for (family, tag) in [(&params.vanilla, 0u64), (&params.perturbed, 1u64)] {
            for draw in 0..VARIANT_DRAW_BUDGET / 2 {
                if kept_vanilla >= per_pair && kept_perturbed >= per_pair {
                    break;
                }
                let draw_seed = derive_labeled(
                    seed,
                    "variant",
                    ((pair_idx as u64) << 32) | (tag << 16) | draw as u64,
                );
                let path = hybrid::sample_path(family, draw_seed);
                let trace = run_scenario(scenario, &path, &params.ind_path)?;
                if trace.off_road {
                    continue;
                }
                let (kind, counterpart, kept) = if trace.collision {
                    (PathKind::VariantPerturbed, &core_perturbed, &mut kept_perturbed)
                } else {
                    (PathKind::VariantVanilla, &core_vanilla, &mut kept_vanilla)
                };
                if *kept >= per_pair {
                    continue;
                }
                let distance = cost::raw_pair_distance(&path, counterpart);
                if distance < band.0 || distance >= band.1 {
                    continue;
                }
                let record = PathRecord {
                    id: format!("{pair_id}-{kind}-{:02}", *kept),
                    kind,
                    label: kind.label(),
                    path,
                    trace,
                    pair_id: Some(pair_id.clone()),
                    provenance: Provenance {
                        seed: draw_seed,
                        iteration: 0,
                        params_digest: format!("{:016x}", family.digest()),
                    },
                };
                archive.insert(record)?;
                *kept += 1;
            }
        }
        report.kept_vanilla += kept_vanilla;
        report.kept_perturbed += kept_perturbed;
        if kept_vanilla < per_pair || kept_perturbed < per_pair {
            report.budget_exhausted += 1;
        }
    }
    Ok(report)
}

/// Outcome of a `generate_rudimentary` run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RudimentaryGenReport {
    pub kept: usize,
    pub draws: usize,
}

/// Sample naturalistic paths from the un-updated prior, keeping only
/// on-road non-collision traces. Colliding draws are discarded and redrawn
/// within a `10 * count` budget.
pub fn generate_rudimentary(
    archive: &mut Archive,
    count: usize,
    scenario: &ScenarioConfig,
    base_params: &HybridParams,
    seed: u64,
) -> Result<RudimentaryGenReport> {
    let mut report = RudimentaryGenReport::default();
    if count == 0 {
        return Ok(report);
    }
    let scripted = scenario.ind_adv_behavior.scripted_path();
    let existing = archive
        .records
        .iter()
        .filter(|r| r.kind == PathKind::Rudimentary)
        .count();
    let budget = 10 * count;
    let mut kept = 0usize;
    for draw in 0..budget {
        if kept >= count {
            break;
        }
        report.draws += 1;
        let path_seed = derive_labeled(seed, "rudimentary", draw as u64);
        let path = hybrid::sample_path(base_params, path_seed);
        let ind_path = scripted.clone().unwrap_or_else(|| {
            hybrid::sample_path(base_params, derive_labeled(seed, "rudimentary-ind", draw as u64))
        });
        let trace = run_scenario(scenario, &path, &ind_path)?;
        if trace.collision || trace.off_road {
            continue;
        }
        let record = PathRecord {
            id: format!("rud-{:04}", existing + kept),
            kind: PathKind::Rudimentary,
            label: 0,
            path,
            trace,
            pair_id: None,
            provenance: Provenance {
                seed: path_seed,
                iteration: 0,
                params_digest: format!("{:016x}", base_params.digest()),
            },
        };
        archive.insert(record)?;
        kept += 1;
    }
    report.kept = kept;
    Ok(report)
}

// ── dataset composition ───────────────────────────────────────────────────

/// A deterministic selection of archive records.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    /// Selected record ids in deterministic order.
    pub record_ids: Vec<String>,
    pub digest: String,
    /// (zero-labeled, one-labeled) counts.
    pub class_balance: (usize, usize),
    pub warnings: Vec<String>,
}

/// Select `mix[kind]` records of each kind, by ascending id. Errors list
/// every shortfall; a single-class mix gets a warning.
pub fn compose_dataset(archive: &Archive, mix: &BTreeMap<PathKind, usize>) -> Result<DatasetHandle> {
    let mut shortfalls = Vec::new();
    let mut record_ids = Vec::new();
    for kind in PathKind::ALL {
        let want = mix.get(&kind).copied().unwrap_or(0);
        if want == 0 {
            continue;
        }
        let ids = archive.ids_of_kind(kind);
        if ids.len() < want {
            shortfalls.push(format!("{kind}: requested {want}, available {}", ids.len()));
            continue;
        }
        record_ids.extend(ids[..want].iter().map(|s| s.to_string()));
    }
    if !shortfalls.is_empty() {
        return Err(Error::Shortfall(shortfalls.join("; ")));
    }

    let mut zeros = 0usize;
    let mut ones = 0usize;
    let mut h = Hasher::new();
    for id in &record_ids {
        let r = archive.get(id).expect("selected id exists");
        match r.label {
            0 => zeros += 1,
            _ => ones += 1,
        }
        h.update(r.digest().as_bytes());
    }
    let mut warnings = Vec::new();
    if zeros == 0 || ones == 0 {
        warnings.push(format!(
            "degenerate class balance: {zeros} zero-labeled, {ones} one-labeled"
        ));
    }
    Ok(DatasetHandle {
        record_ids,
        digest: h.finish_hex(),
        class_balance: (zeros, ones),
        warnings,
    })
}

// ── persistence ───────────────────────────────────────────────────────────

/// One line of `archive.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    kind: PathKind,
    label: u8,
    pair_id: Option<String>,
    seed: u64,
    trace_file: String,
    iteration: usize,
    params_digest: String,
    moves: Vec<usize>,
    accels: Vec<f64>,
}

/// A file written by `save`, with its digest, for the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct SavedFile {
    pub path: String,
    pub digest: String,
}

/// Persist the archive: `archive.jsonl`, one content-addressed trace file
/// per record under `traces/`, and the converged per-pair distributions
/// under `params/` (one object per adversary, line-delimited).
pub fn save(archive: &Archive, dir: &Path) -> Result<Vec<SavedFile>> {
    fs::create_dir_all(dir.join("traces"))?;
    fs::create_dir_all(dir.join("params"))?;
    let mut files = Vec::new();

    let mut records: Vec<&PathRecord> = archive.records.iter().collect();
    records.sort_unstable_by(|a, b| a.id.cmp(&b.id));

    let mut jsonl = String::new();
    for r in records {
        let bbox = r.trace.samples[0].ego.bbox;
        let csv = r.trace.to_csv(bbox);
        let digest = hex_digest(csv.as_bytes());
        let trace_name = format!("traces/{digest}.csv");
        let trace_path = dir.join(&trace_name);
        if !trace_path.exists() {
            fs::write(&trace_path, &csv)?;
        }
        files.push(SavedFile {
            path: trace_name.clone(),
            digest,
        });
        let line = RecordLine {
            id: r.id.clone(),
            kind: r.kind,
            label: r.label,
            pair_id: r.pair_id.clone(),
            seed: r.provenance.seed,
            trace_file: trace_name,
            iteration: r.provenance.iteration,
            params_digest: r.provenance.params_digest.clone(),
            moves: r.path.moves.clone(),
            accels: r.path.accels.clone(),
        };
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }
    fs::write(dir.join("archive.jsonl"), &jsonl)?;
    files.push(SavedFile {
        path: "archive.jsonl".into(),
        digest: hex_digest(jsonl.as_bytes()),
    });

    for (pair_id, params) in &archive.pair_params {
        let mut text = String::new();
        for p in [&params.vanilla, &params.perturbed, &params.ind_adv] {
            text.push_str(&p.to_jsonl_line());
            text.push('\n');
        }
        let name = format!("params/{pair_id}.jsonl");
        fs::write(dir.join(&name), &text)?;
        files.push(SavedFile {
            path: name,
            digest: hex_digest(text.as_bytes()),
        });
    }
    Ok(files)
}

/// Load an archive directory, re-validating every record.
pub fn load(dir: &Path) -> Result<Archive> {
    let jsonl = fs::read_to_string(dir.join("archive.jsonl"))
        .map_err(|_| Error::MissingArtifact(format!("{}/archive.jsonl", dir.display())))?;
    let mut archive = Archive::new();
    for line in jsonl.lines() {
        if line.is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(line)?;
        let csv = fs::read_to_string(dir.join(&rec.trace_file))
            .map_err(|_| Error::MissingArtifact(rec.trace_file.clone()))?;
        let trace = SimTrace::from_csv(&csv)?;
        let record = PathRecord {
            id: rec.id,
            kind: rec.kind,
            label: rec.label,
            path: HybridPath::new(rec.moves, rec.accels)?,
            trace,
            pair_id: rec.pair_id,
            provenance: Provenance {
                seed: rec.seed,
                iteration: rec.iteration,
                params_digest: rec.params_digest,
            },
        };
        archive.insert(record)?;
    }
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{BBox, IndAdvBehavior, TraceSample, Vec2, VehicleState};

    fn fake_state() -> VehicleState {
        VehicleState {
            position: Vec2::new(0.0, 0.0),
            velocity: [5.0, 0.0, 0.0],
            acceleration: [0.0; 3],
            angular_velocity: [0.0; 3],
            heading: 0.0,
            bbox: BBox {
                length: 4.5,
                width: 2.0,
            },
        }
    }

    fn fake_trace(collision: bool) -> SimTrace {
        let s = fake_state();
        SimTrace {
            timestep: 0.1,
            samples: vec![TraceSample {
                t: 0.0,
                ego: s,
                adv: s,
                ind_adv: s,
            }],
            collision,
            t_collision: collision.then_some(0.0),
            min_distance: if collision { 0.0 } else { 8.0 },
            off_road: false,
        }
    }

    fn fake_record(id: &str, kind: PathKind, moves: Vec<usize>, accels: Vec<f64>) -> PathRecord {
        PathRecord {
            id: id.into(),
            kind,
            label: kind.label(),
            path: HybridPath::new(moves, accels).unwrap(),
            trace: fake_trace(kind.label() == 1),
            pair_id: None,
            provenance: Provenance {
                seed: 0,
                iteration: 0,
                params_digest: "0".repeat(16),
            },
        }
    }

    #[test]
    fn label_consistency_guard_rejects_mislabeled_records() {
        let mut archive = Archive::new();
        let mut bad = fake_record("x-0", PathKind::Perturbed, vec![1; 4], vec![0.0; 4]);
        bad.trace = fake_trace(false); // perturbed kind, no collision
        assert!(matches!(
            archive.insert(bad),
            Err(Error::InconsistentRecord { .. })
        ));

        let mut also_bad = fake_record("x-1", PathKind::Vanilla, vec![1; 4], vec![0.0; 4]);
        also_bad.trace = fake_trace(true);
        assert!(also_bad.validate().is_err());
    }

    #[test]
    fn incremental_stats_match_two_pass_recomputation() {
        let mut archive = Archive::new();
        let mut seed = 0u64;
        for i in 0..40 {
            let kind = if i % 2 == 0 {
                PathKind::Vanilla
            } else {
                PathKind::Perturbed
            };
            seed = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let moves: Vec<usize> = (0..6).map(|j| ((seed >> (j * 8)) % 6) as usize).collect();
            let accels: Vec<f64> = (0..6)
                .map(|j| ((seed >> (j * 4)) % 100) as f64 / 25.0 - 2.0)
                .collect();
            archive
                .insert(fake_record(&format!("r-{i:03}"), kind, moves, accels))
                .unwrap();

            let inc = archive.stats();
            let batch = archive.recompute_stats();
            for (a, b) in [
                (inc.vanilla_location, batch.vanilla_location),
                (inc.vanilla_accel, batch.vanilla_accel),
                (inc.perturbed_location, batch.perturbed_location),
                (inc.perturbed_accel, batch.perturbed_accel),
            ] {
                match (a, b) {
                    (None, None) => {}
                    (Some(x), Some(y)) => {
                        assert!((x.mean - y.mean).abs() < 1e-9);
                        assert!((x.std - y.std).abs() < 1e-9);
                    }
                    _ => panic!("presence mismatch"),
                }
            }
        }
    }

    #[test]
    fn helper_kinds_do_not_move_stats() {
        let mut archive = Archive::new();
        archive
            .insert(fake_record("a", PathKind::Vanilla, vec![1; 4], vec![0.5; 4]))
            .unwrap();
        archive
            .insert(fake_record("b", PathKind::Vanilla, vec![0; 4], vec![-0.5; 4]))
            .unwrap();
        let before = archive.stats();
        archive
            .insert(fake_record("c", PathKind::Rudimentary, vec![4; 4], vec![3.0; 4]))
            .unwrap();
        archive
            .insert(fake_record("d", PathKind::VariantVanilla, vec![5; 4], vec![-3.0; 4]))
            .unwrap();
        assert_eq!(before, archive.stats());
    }

    fn variant_fixture() -> (Archive, ScenarioConfig) {
        let mut scenario = ScenarioConfig::reference();
        scenario.ind_adv_behavior = IndAdvBehavior::Scripted {
            moves: vec![1; 10],
            accels: vec![0.0; 10],
        };
        let mut archive = Archive::new();
        let prior = engine::driving_prior(10);
        let ind_path = scenario.ind_adv_behavior.scripted_path().unwrap();

        // A hand-built pair: vanilla rolls forward, perturbed cuts into the
        // ego lane and brakes to a stop. (Traces are real simulator output.)
        let vanilla_path = HybridPath::new(vec![1; 10], vec![0.0; 10]).unwrap();
        let perturbed_path = HybridPath::new(
            vec![1, 3, 0, 0, 0, 0, 0, 0, 0, 0],
            vec![-2.0, -2.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let vanilla_trace = run_scenario(&scenario, &vanilla_path, &ind_path).unwrap();
        let perturbed_trace = run_scenario(&scenario, &perturbed_path, &ind_path).unwrap();
        assert!(!vanilla_trace.collision);
        assert!(perturbed_trace.collision, "fixture perturbed path must collide");

        archive
            .insert(PathRecord {
                id: "pair-0000-vanilla".into(),
                kind: PathKind::Vanilla,
                label: 0,
                path: vanilla_path,
                trace: vanilla_trace,
                pair_id: Some("pair-0000".into()),
                provenance: Provenance {
                    seed: 1,
                    iteration: 1,
                    params_digest: "0".repeat(16),
                },
            })
            .unwrap();
        archive
            .insert(PathRecord {
                id: "pair-0000-perturbed".into(),
                kind: PathKind::Perturbed,
                label: 1,
                path: perturbed_path,
                trace: perturbed_trace,
                pair_id: Some("pair-0000".into()),
                provenance: Provenance {
                    seed: 1,
                    iteration: 1,
                    params_digest: "0".repeat(16),
                },
            })
            .unwrap();
        archive.insert_pair_params(
            "pair-0000",
            PairParams {
                vanilla: prior.clone(),
                perturbed: prior.clone(),
                ind_adv: prior,
                ind_path,
            },
        );
        (archive, scenario)
    }

    #[test]
    fn empty_band_keeps_no_variants() {
        let (mut archive, scenario) = variant_fixture();
        let report = generate_variants(&mut archive, 3, (0.0, 0.0), &scenario, 7).unwrap();
        assert_eq!(report.kept_vanilla + report.kept_perturbed, 0);
        assert_eq!(archive.records().len(), 2);
    }

    #[test]
    fn kept_variants_respect_band_and_labels() {
        let (mut archive, scenario) = variant_fixture();
        let band = (0.5, 6.0);
        generate_variants(&mut archive, 2, band, &scenario, 7).unwrap();
        for r in archive.records() {
            match r.kind {
                PathKind::VariantVanilla => {
                    assert!(!r.trace.collision);
                    let core = archive.get("pair-0000-vanilla").unwrap();
                    let d = cost::raw_pair_distance(&r.path, &core.path);
                    assert!(d >= band.0 && d < band.1, "distance {d} outside band");
                }
                PathKind::VariantPerturbed => {
                    assert!(r.trace.collision);
                    let core = archive.get("pair-0000-perturbed").unwrap();
                    let d = cost::raw_pair_distance(&r.path, &core.path);
                    assert!(d >= band.0 && d < band.1, "distance {d} outside band");
                }
                _ => {}
            }
        }
    }

    #[test]
    fn rudimentary_draws_are_mostly_kept_and_zero_labeled() {
        let mut scenario = ScenarioConfig::reference();
        scenario.ind_adv_behavior = IndAdvBehavior::Scripted {
            moves: vec![1; 10],
            accels: vec![0.0; 10],
        };
        let mut archive = Archive::new();
        let prior = engine::driving_prior(10);
        let report = generate_rudimentary(&mut archive, 100, &scenario, &prior, 11).unwrap();
        assert_eq!(report.kept, 100);
        let rate = report.kept as f64 / report.draws as f64;
        assert!(rate >= 0.95, "acceptance rate {rate}");
        assert!(archive
            .records()
            .iter()
            .all(|r| r.kind == PathKind::Rudimentary && r.label == 0 && !r.trace.collision));
    }

    #[test]
    fn rudimentary_zero_count_is_a_no_op() {
        let mut archive = Archive::new();
        let scenario = ScenarioConfig::reference();
        let prior = engine::driving_prior(10);
        let report = generate_rudimentary(&mut archive, 0, &scenario, &prior, 1).unwrap();
        assert_eq!(report.kept, 0);
        assert_eq!(report.draws, 0);
        assert!(archive.records().is_empty());
    }

    #[test]
    fn generate_core_single_batch_inserts_one_pair() {
        let scenario = ScenarioConfig::reference();
        let ce = CeConfig::with_seed(41);
        let mut archive = Archive::new();
        assert_eq!(archive.stats(), crate::cost::DatasetStats::empty());
        let report = generate_core(
            &mut archive,
            1,
            &ce,
            &scenario,
            &cost::CostConfig::default(),
            &crate::hybrid::ImportanceWeightConfig::unit(),
        )
        .unwrap();
        assert_eq!(report.completed, 1);
        assert_eq!(archive.records().len(), 2);
        let labels: Vec<u8> = archive.records().iter().map(|r| r.label).collect();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 1);
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 1);
        assert_eq!(archive.pair_params().len(), 1);
        assert_eq!(report.histories.len(), 1);
    }

    #[test]
    fn compose_selects_deterministically_and_reports_balance() {
        let mut archive = Archive::new();
        for i in 0..11 {
            archive
                .insert(fake_record(
                    &format!("v-{i:02}"),
                    PathKind::Vanilla,
                    vec![1; 4],
                    vec![0.1 * i as f64; 4],
                ))
                .unwrap();
        }
        for i in 0..3 {
            archive
                .insert(fake_record(
                    &format!("p-{i:02}"),
                    PathKind::Perturbed,
                    vec![1; 4],
                    vec![0.2 * i as f64; 4],
                ))
                .unwrap();
        }
        let mix = BTreeMap::from([(PathKind::Vanilla, 11usize), (PathKind::Perturbed, 3usize)]);
        let d1 = compose_dataset(&archive, &mix).unwrap();
        let d2 = compose_dataset(&archive, &mix).unwrap();
        assert_eq!(d1.digest, d2.digest);
        assert_eq!(d1.record_ids, d2.record_ids);
        assert_eq!(d1.class_balance, (11, 3));
        // Same imbalance ratio as the full-scale dataset shape.
        let ratio = d1.class_balance.0 as f64 / d1.class_balance.1 as f64;
        assert!((ratio - 770.0 / 210.0).abs() < 1e-9);

        let zeros_only = BTreeMap::from([(PathKind::Vanilla, 4usize)]);
        let d3 = compose_dataset(&archive, &zeros_only).unwrap();
        assert!(!d3.warnings.is_empty());

        let too_many = BTreeMap::from([(PathKind::Rudimentary, 1usize)]);
        let err = compose_dataset(&archive, &too_many).unwrap_err();
        assert!(matches!(err, Error::Shortfall(_)));
    }

    #[test]
    fn save_and_load_round_trip() {
        let (mut archive, scenario) = variant_fixture();
        generate_variants(&mut archive, 1, (0.5, 6.0), &scenario, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&archive, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.records().len(), archive.records().len());
        assert_eq!(loaded.digest(), archive.digest());
        for r in loaded.records() {
            r.validate().unwrap();
        }
        // jsonl carries the contract keys.
        let text = std::fs::read_to_string(dir.path().join("archive.jsonl")).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["id", "kind", "label", "pair_id", "seed", "trace_file"] {
            assert!(first.get(key).is_some(), "missing key {key}");
        }
    }
}
