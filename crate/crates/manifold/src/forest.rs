//! The learned correctness property: a bagged CART forest over feature
//! rows, trained from scratch (axis-aligned threshold splits, Gini
//! impurity, majority vote).
//!
//! Vote ties go to class 1: for a collision-warning property a missed alarm
//! costs more than a spurious one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::archive::{Archive, PathKind};
use crate::digest::Hasher;
use crate::error::{Error, Result};
use crate::features::{self, FeatureMatrix, FeatureRow, WindowSpec};
use crate::rng::{self, derive_labeled, DetRng};
use crate::sim::SimTrace;
use rand::Rng;

/// How many features each split considers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRule {
    /// floor(sqrt(feature count)), at least 1.
    Sqrt,
    /// Every feature (classic single-tree CART).
    All,
    Fixed(usize),
}

impl SplitRule {
    fn count(&self, n_features: usize) -> usize {
        match self {
            SplitRule::Sqrt => ((n_features as f64).sqrt().floor() as usize).max(1),
            SplitRule::All => n_features,
            SplitRule::Fixed(k) => (*k).clamp(1, n_features),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until purity or the leaf-size floor.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub features_per_split: SplitRule,
    pub bootstrap: bool,
    pub seed: u64,
}

impl ForestConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 2,
            features_per_split: SplitRule::Sqrt,
            bootstrap: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_samples_leaf == 0 {
            return Err(Error::InvalidParameter {
                name: "forest".into(),
                reason: "n_trees and min_samples_leaf must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Flat tree node; children index into the tree's node arena.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "node")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        class: u8,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> u8 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { class } => return *class,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// What the model was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub matrix_digest: String,
    pub source_digest: String,
    pub window: WindowSpec,
    pub config: ForestConfig,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub schema_digest: String,
    pub manifest: TrainingManifest,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    /// Majority vote over the trees. The score is the fraction voting 1;
    /// the label is 1 iff the score reaches 0.5 (ties to 1).
    pub fn predict(&self, row: &[f64]) -> Result<(u8, f64)> {
        let expected = self.manifest.window.row_len();
        if row.len() != expected {
            return Err(Error::SchemaMismatch {
                expected: format!("{} columns ({})", expected, self.schema_digest),
                actual: format!("{} columns", row.len()),
            });
        }
        let votes: usize = self.trees.iter().map(|t| t.predict(row) as usize).sum();
        let score = votes as f64 / self.trees.len() as f64;
        Ok((u8::from(score >= 0.5), score))
    }

    pub fn digest(&self) -> String {
        let mut h = Hasher::new();
        h.update(serde_json::to_string(self).expect("model serialize").as_bytes());
        h.finish_hex()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        Self::from_json(&text)
    }
}

fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

fn majority(counts: [usize; 2]) -> u8 {
    // Ties to 1, consistent with the vote tie rule.
    u8::from(counts[1] >= counts[0])
}

struct TreeBuilder<'a> {
    rows: &'a [FeatureRow],
    n_features: usize,
    config: &'a ForestConfig,
    nodes: Vec<TreeNode>,
}

impl<'a> TreeBuilder<'a> {
    /// Best (feature, threshold) over the candidate features by weighted
    /// child Gini; candidates scan features in ascending index and
    /// thresholds ascending, keeping the first strict improvement.
    fn best_split(&self, idx: &[usize], feature_pool: &[usize]) -> Option<(usize, f64)> {
        let mut total = [0usize; 2];
        for &i in idx {
            total[self.rows[i].label as usize] += 1;
        }
        let parent = gini(total);
        if parent == 0.0 {
            return None;
        }
        let n = idx.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None;

        for &feature in feature_pool {
            let mut values: Vec<(f64, u8)> = idx
                .iter()
                .map(|&i| (self.rows[i].values[feature], self.rows[i].label))
                .collect();
            values.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));

            let mut left = [0usize; 2];
            let mut right = total;
            for k in 0..values.len() - 1 {
                left[values[k].1 as usize] += 1;
                right[values[k].1 as usize] -= 1;
                if values[k].0 == values[k + 1].0 {
                    continue;
                }
                let n_left = k + 1;
                let n_right = values.len() - n_left;
                if n_left < self.config.min_samples_leaf || n_right < self.config.min_samples_leaf
                {
                    continue;
                }
                let weighted =
                    (n_left as f64 * gini(left) + n_right as f64 * gini(right)) / n;
                if weighted + 1e-12 < best.map_or(parent, |(w, _, _)| w) {
                    let threshold = (values[k].0 + values[k + 1].0) / 2.0;
                    best = Some((weighted, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut DetRng) -> usize {
        let mut counts = [0usize; 2];
        for &i in &idx {
            counts[self.rows[i].label as usize] += 1;
        }
        let depth_capped = self.config.max_depth.is_some_and(|d| depth >= d);
        if counts[0] == 0 || counts[1] == 0 || depth_capped || idx.len() < 2 * self.config.min_samples_leaf
        {
            self.nodes.push(TreeNode::Leaf {
                class: majority(counts),
            });
            return self.nodes.len() - 1;
        }

        let k = self.config.features_per_split.count(self.n_features);
        let feature_pool = if k >= self.n_features {
            (0..self.n_features).collect::<Vec<_>>()
        } else {
            // Partial Fisher-Yates draw without replacement, then ascending
            // so tie-breaks stay index-ordered.
            let mut all: Vec<usize> = (0..self.n_features).collect();
            for i in 0..k {
                let j = rng.gen_range(i..all.len());
                all.swap(i, j);
            }
            let mut pool = all[..k].to_vec();
            pool.sort_unstable();
            pool
        };

        let Some((feature, threshold)) = self.best_split(&idx, &feature_pool) else {
            self.nodes.push(TreeNode::Leaf {
                class: majority(counts),
            });
            return self.nodes.len() - 1;
        };

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| self.rows[i].values[feature] <= threshold);

        let slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { class: 0 }); // placeholder
        let left = self.grow(left_idx, depth + 1, rng);
        let right = self.grow(right_idx, depth + 1, rng);
        self.nodes[slot] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

fn train_tree(matrix: &FeatureMatrix, config: &ForestConfig, tree_index: usize) -> Tree {
    let mut rng = rng::rng_from_seed(derive_labeled(config.seed, "tree", tree_index as u64));
    let n = matrix.rows.len();
    let idx: Vec<usize> = if config.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut builder = TreeBuilder {
        rows: &matrix.rows,
        n_features: matrix.spec.row_len(),
        config,
        nodes: Vec::new(),
    };
    let root = builder.grow(idx, 0, &mut rng);
    debug_assert_eq!(root, 0);
    Tree {
        nodes: builder.nodes,
    }
}

/// Train a bagged CART forest. Deterministic given `(matrix, config)`; the
/// per-tree RNG is derived from the seed and tree index, so tree training
/// order (and thread scheduling) cannot affect the result.
pub fn train(matrix: &FeatureMatrix, config: &ForestConfig) -> Result<ForestModel> {
    config.validate()?;
    let labels: Vec<u8> = matrix.rows.iter().map(|r| r.label).collect();
    if matrix.rows.is_empty() || labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
        return Err(Error::DegenerateLabels);
    }
    if matrix
        .rows
        .iter()
        .any(|r| r.values.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidParameter {
            name: "matrix".into(),
            reason: "non-finite feature value".into(),
        });
    }

    let trees: Vec<Tree> = (0..config.n_trees)
        .into_par_iter()
        .map(|i| train_tree(matrix, config, i))
        .collect();

    Ok(ForestModel {
        schema_digest: matrix.schema_digest(),
        manifest: TrainingManifest {
            matrix_digest: matrix.digest(),
            source_digest: matrix.source_digest.clone(),
            window: matrix.spec,
            config: *config,
            rows: matrix.rows.len(),
        },
        trees,
    })
}

/// Confusion counts and the derived metrics; ratios with a zero denominator
/// are reported absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub false_negative_rate: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let recall = ratio(tp, tp + fn_);
        let precision = ratio(tp, tp + fp);
        let specificity = ratio(tn, tn + fp);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        let balanced_accuracy = match (recall, specificity) {
            (Some(se), Some(sp)) => Some(0.5 * (se + sp)),
            _ => None,
        };
        let false_negative_rate = ratio(fn_, tp + fn_);
        Self {
            tp,
            fp,
            tn,
            fn_,
            recall,
            precision,
            f1,
            balanced_accuracy,
            false_negative_rate,
        }
    }

    /// Misclassified rows.
    pub fn errors(&self) -> usize {
        self.fp + self.fn_
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    const CSV_HEADER: &'static str =
        "tp,fp,tn,fn,recall,precision,f1,balanced_accuracy,false_negative_rate";

    pub fn csv_header() -> &'static str {
        Self::CSV_HEADER
    }

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            opt(self.recall),
            opt(self.precision),
            opt(self.f1),
            opt(self.balanced_accuracy),
            opt(self.false_negative_rate),
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Malformed {
                what: "eval report".into(),
                detail: format!("{} fields, expected 9", fields.len()),
            });
        }
        let count = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Malformed {
                what: "eval report".into(),
                detail: format!("bad count {s}"),
            })
        };
        Ok(Self::from_counts(
            count(fields[0])?,
            count(fields[1])?,
            count(fields[2])?,
            count(fields[3])?,
        ))
    }
}

/// Evaluate a model on a labeled matrix.
pub fn evaluate(model: &ForestModel, matrix: &FeatureMatrix) -> Result<EvalReport> {
    if matrix.schema_digest() != model.schema_digest {
        return Err(Error::SchemaMismatch {
            expected: model.schema_digest.clone(),
            actual: matrix.schema_digest(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for row in &matrix.rows {
        let (label, _) = model.predict(&row.values)?;
        match (row.label, label) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fn_ += 1,
            _ => unreachable!("labels are 0/1"),
        }
    }
    Ok(EvalReport::from_counts(tp, fp, tn, fn_))
}

/// Deterministic stratified split: within each class, rows are shuffled by
/// the seeded RNG and `test_fraction` of them go to the test side.
pub fn split_train_test(
    matrix: &FeatureMatrix,
    test_fraction: f64,
    seed: u64,
) -> (FeatureMatrix, FeatureMatrix) {
    let mut rng = rng::rng_from_seed(derive_labeled(seed, "split", 0));
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..matrix.rows.len())
            .filter(|&i| matrix.rows[i].label == class)
            .collect();
        // Fisher-Yates with the shared RNG.
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            if k < n_test {
                test_rows.push(matrix.rows[i].clone());
            } else {
                train_rows.push(matrix.rows[i].clone());
            }
        }
    }
    let mk = |rows: Vec<FeatureRow>| FeatureMatrix {
        spec: matrix.spec,
        rows,
        source_digest: matrix.source_digest.clone(),
    };
    (mk(train_rows), mk(test_rows))
}

/// One row of the advance-notice sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub gap: f64,
    pub feasible: bool,
    pub report: Option<EvalReport>,
}

/// Sweep the gap `X` over `gaps` with fixed `Y`/`R`: rebuild the matrix,
/// split 70/30 stratified, train, evaluate. Gaps whose window falls outside
/// some trace are reported infeasible and the sweep continues.
pub fn notice_sweep(
    archive: &Archive,
    dataset: &crate::archive::DatasetHandle,
    gaps: &[f64],
    length: f64,
    period: f64,
    config: &ForestConfig,
    split_seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut out = Vec::with_capacity(gaps.len());
    for &gap in gaps {
        let spec = WindowSpec::new(gap, length, period)?;
        let matrix = match features::build_matrix(archive, dataset, &spec) {
            Ok(m) => m,
            Err(Error::Extraction { .. }) | Err(Error::WindowOutOfRange { .. }) => {
                out.push(SweepRow {
                    gap,
                    feasible: false,
                    report: None,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let (train_m, test_m) = split_train_test(&matrix, 0.3, split_seed);
        let model = train(&train_m, config)?;
        let report = evaluate(&model, &test_m)?;
        out.push(SweepRow {
            gap,
            feasible: true,
            report: Some(report),
        });
    }
    Ok(out)
}

/// Sweep table as comma-separated text for plotting.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("gap,feasible,{}\n", EvalReport::csv_header());
    for r in rows {
        let metrics = r
            .report
            .as_ref()
            .map(|m| m.to_csv_row())
            .unwrap_or_else(|| ",".repeat(8));
        out.push_str(&format!("{:?},{},{}\n", r.gap, r.feasible, metrics));
    }
    out
}

/// Train on records of `train_kinds` only, evaluate on `test_kinds` only.
/// The kind sets must be non-empty and disjoint.
pub fn ablation_eval(
    archive: &Archive,
    train_kinds: &[PathKind],
    test_kinds: &[PathKind],
    spec: &WindowSpec,
    config: &ForestConfig,
) -> Result<EvalReport> {
    if train_kinds.is_empty()
        || test_kinds.is_empty()
        || train_kinds.iter().any(|k| test_kinds.contains(k))
    {
        return Err(Error::BadPartition);
    }
    let side = |kinds: &[PathKind]| -> Result<FeatureMatrix> {
        let mut mix = std::collections::BTreeMap::new();
        for &k in kinds {
            let available = archive.ids_of_kind(k).len();
            if available > 0 {
                mix.insert(k, available);
            }
        }
        let dataset = crate::archive::compose_dataset(archive, &mix)?;
        features::build_matrix(archive, &dataset, spec)
    };
    let train_matrix = side(train_kinds)?;
    let test_matrix = side(test_kinds)?;
    let model = train(&train_matrix, config)?;
    evaluate(&model, &test_matrix)
}

/// Slide the window anchor across a recorded trace, emitting one
/// `(anchor, label, score)` prediction per stride. A trace shorter than the
/// window yields an empty log.
pub fn monitor(
    model: &ForestModel,
    trace: &SimTrace,
    stride: f64,
) -> Result<Vec<(f64, u8, f64)>> {
    if stride <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "stride".into(),
            reason: "stride must be positive".into(),
        });
    }
    // Anchors must land on recorded instants; there is no interpolation.
    let ratio = stride / trace.timestep;
    if (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::InvalidParameter {
            name: "stride".into(),
            reason: format!(
                "{stride} s must be an integer multiple of the trace timestep {}",
                trace.timestep
            ),
        });
    }
    let spec = model.manifest.window;
    let mut out = Vec::new();
    let mut anchor = spec.gap + spec.length;
    while anchor - spec.gap <= trace.end_time() + 1e-9 {
        let values = features::extract_window(trace, &spec, anchor)?;
        let (label, score) = model.predict(&values)?;
        out.push((anchor, label, score));
        anchor += stride;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_matrix(n_per_class: usize) -> FeatureMatrix {
        // Two informative features on a separable diagonal; spec is a
        // 2-sample window giving 66 columns, the rest constant.
        let spec = WindowSpec::new(0.0, 0.1, 0.1).unwrap();
        let mut rows = Vec::new();
        for i in 0..n_per_class {
            let x = i as f64 / n_per_class as f64;
            let mut v0 = vec![0.5; spec.row_len()];
            v0[0] = x;
            v0[1] = x * 0.5;
            rows.push(FeatureRow {
                values: v0,
                label: 0,
                source_id: format!("z{i}"),
                anchor_time: 0.0,
            });
            let mut v1 = vec![0.5; spec.row_len()];
            v1[0] = x + 2.0;
            v1[1] = x * 0.5 + 1.0;
            rows.push(FeatureRow {
                values: v1,
                label: 1,
                source_id: format!("o{i}"),
                anchor_time: 0.0,
            });
        }
        FeatureMatrix {
            spec,
            rows,
            source_digest: "0".repeat(16),
        }
    }

    #[test]
    fn separable_data_memorized() {
        let matrix = toy_matrix(20);
        let cfg = ForestConfig {
            n_trees: 15,
            ..ForestConfig::with_seed(7)
        };
        let model = train(&matrix, &cfg).unwrap();
        let report = evaluate(&model, &matrix).unwrap();
        assert_eq!(report.errors(), 0);
        assert_eq!(report.recall, Some(1.0));
        assert_eq!(report.precision, Some(1.0));
        assert_eq!(report.f1, Some(1.0));
    }

    #[test]
    fn single_class_matrix_is_degenerate() {
        let mut matrix = toy_matrix(5);
        matrix.rows.retain(|r| r.label == 0);
        let err = train(&matrix, &ForestConfig::with_seed(1)).unwrap_err();
        assert!(matches!(err, Error::DegenerateLabels));
    }

    #[test]
    fn training_is_deterministic() {
        let matrix = toy_matrix(15);
        let cfg = ForestConfig {
            n_trees: 9,
            ..ForestConfig::with_seed(42)
        };
        let a = train(&matrix, &cfg).unwrap();
        let b = train(&matrix, &cfg).unwrap();
        assert_eq!(a.digest(), b.digest());
        let other = train(
            &matrix,
            &ForestConfig {
                seed: 43,
                ..cfg
            },
        )
        .unwrap();
        assert_ne!(a.digest(), other.digest());
    }

    /// Exhaustive CART oracle: scan every feature and every midpoint with
    /// naive counting, recursing exactly like the implementation claims to.
    mod cart_oracle {
        use super::*;

        fn oracle_gini(labels: &[u8]) -> f64 {
            let n = labels.len() as f64;
            let ones = labels.iter().filter(|&&l| l == 1).count() as f64;
            let p1 = ones / n;
            let p0 = 1.0 - p1;
            1.0 - p0 * p0 - p1 * p1
        }

        fn oracle_best(rows: &[(Vec<f64>, u8)], min_leaf: usize) -> Option<(usize, f64)> {
            let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let parent = oracle_gini(&labels);
            if parent == 0.0 {
                return None;
            }
            let n_features = rows[0].0.len();
            let mut best: Option<(f64, usize, f64)> = None;
            for f in 0..n_features {
                let mut vals: Vec<f64> = rows.iter().map(|r| r.0[f]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                vals.dedup();
                for w in vals.windows(2) {
                    let thr = (w[0] + w[1]) / 2.0;
                    let left: Vec<u8> =
                        rows.iter().filter(|r| r.0[f] <= thr).map(|r| r.1).collect();
                    let right: Vec<u8> =
                        rows.iter().filter(|r| r.0[f] > thr).map(|r| r.1).collect();
                    if left.len() < min_leaf || right.len() < min_leaf {
                        continue;
                    }
                    let weighted = (left.len() as f64 * oracle_gini(&left)
                        + right.len() as f64 * oracle_gini(&right))
                        / rows.len() as f64;
                    if weighted + 1e-12 < best.map_or(parent, |(b, _, _)| b) {
                        best = Some((weighted, f, thr));
                    }
                }
            }
            best.map(|(_, f, t)| (f, t))
        }

        fn oracle_splits(
            rows: Vec<(Vec<f64>, u8)>,
            min_leaf: usize,
            out: &mut Vec<(usize, f64)>,
        ) {
            if rows.len() < 2 * min_leaf {
                return;
            }
            let Some((f, t)) = oracle_best(&rows, min_leaf) else {
                return;
            };
            out.push((f, t));
            let (left, right): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.0[f] <= t);
            oracle_splits(left, min_leaf, out);
            oracle_splits(right, min_leaf, out);
        }

        fn tree_splits(tree: &Tree, node: usize, out: &mut Vec<(usize, f64)>) {
            if let TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } = &tree.nodes[node]
            {
                out.push((*feature, *threshold));
                tree_splits(tree, *left, out);
                tree_splits(tree, *right, out);
            }
        }

        #[test]
        fn single_tree_matches_exhaustive_cart() {
            // 20 rows, 4 features, a deterministic but non-trivial pattern.
            let spec = WindowSpec::new(0.0, 0.1, 0.1).unwrap();
            let mut rows = Vec::new();
            let mut raw = Vec::new();
            let mut state = 88172645463325252u64;
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 1000) as f64 / 100.0
            };
            for i in 0..20 {
                let mut values = vec![0.0; spec.row_len()];
                let f: Vec<f64> = (0..4).map(|_| next()).collect();
                values[..4].copy_from_slice(&f);
                let label = u8::from(f[1] + 0.3 * f[2] > 6.0);
                raw.push((values.clone(), label));
                rows.push(FeatureRow {
                    values,
                    label,
                    source_id: format!("r{i}"),
                    anchor_time: 0.0,
                });
            }
            assert!(raw.iter().any(|r| r.1 == 1) && raw.iter().any(|r| r.1 == 0));

            let matrix = FeatureMatrix {
                spec,
                rows,
                source_digest: "0".repeat(16),
            };
            let cfg = ForestConfig {
                n_trees: 1,
                max_depth: None,
                min_samples_leaf: 1,
                features_per_split: SplitRule::All,
                bootstrap: false,
                seed: 0,
            };
            let model = train(&matrix, &cfg).unwrap();

            let mut expected = Vec::new();
            oracle_splits(raw, 1, &mut expected);
            let mut got = Vec::new();
            tree_splits(&model.trees[0], 0, &mut got);
            assert_eq!(got, expected, "split sequence diverges from the CART oracle");
        }
    }

    #[test]
    fn prediction_is_invariant_to_tree_order() {
        let matrix = toy_matrix(12);
        let cfg = ForestConfig {
            n_trees: 11,
            ..ForestConfig::with_seed(2)
        };
        let model = train(&matrix, &cfg).unwrap();
        let mut reversed = model.clone();
        reversed.trees.reverse();
        for row in &matrix.rows {
            assert_eq!(
                model.predict(&row.values).unwrap(),
                reversed.predict(&row.values).unwrap()
            );
        }
    }

    #[test]
    fn predict_unanimity_and_tie_rule() {
        let spec = WindowSpec::new(0.0, 0.1, 0.1).unwrap();
        let manifest = TrainingManifest {
            matrix_digest: "0".repeat(16),
            source_digest: "0".repeat(16),
            window: spec,
            config: ForestConfig::with_seed(0),
            rows: 0,
        };
        let leaf = |class: u8| Tree {
            nodes: vec![TreeNode::Leaf { class }],
        };
        let unanimous = ForestModel {
            schema_digest: spec.schema_digest(),
            manifest: manifest.clone(),
            trees: vec![leaf(1), leaf(1), leaf(1)],
        };
        let row = vec![0.0; spec.row_len()];
        assert_eq!(unanimous.predict(&row).unwrap(), (1, 1.0));

        let split = ForestModel {
            schema_digest: spec.schema_digest(),
            manifest,
            trees: vec![leaf(1), leaf(0)],
        };
        let (label, score) = split.predict(&row).unwrap();
        assert_eq!(score, 0.5);
        assert_eq!(label, 1, "ties go to the alarm class");
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let matrix = toy_matrix(10);
        let model = train(&matrix, &ForestConfig::with_seed(3)).unwrap();
        let short = vec![0.0; 10];
        assert!(matches!(
            model.predict(&short),
            Err(Error::SchemaMismatch { .. })
        ));

        let other_spec = WindowSpec::new(1.0, 0.2, 0.1).unwrap();
        let other = FeatureMatrix {
            spec: other_spec,
            rows: vec![],
            source_digest: String::new(),
        };
        assert!(matches!(
            evaluate(&model, &other),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn degenerate_all_zero_predictor_metrics() {
        let spec = WindowSpec::new(0.0, 0.1, 0.1).unwrap();
        let model = ForestModel {
            schema_digest: spec.schema_digest(),
            manifest: TrainingManifest {
                matrix_digest: "0".repeat(16),
                source_digest: "0".repeat(16),
                window: spec,
                config: ForestConfig::with_seed(0),
                rows: 0,
            },
            trees: vec![Tree {
                nodes: vec![TreeNode::Leaf { class: 0 }],
            }],
        };
        let matrix = toy_matrix(5);
        let report = evaluate(&model, &matrix).unwrap();
        assert_eq!(report.recall, Some(0.0));
        assert_eq!(report.precision, None);
        assert_eq!(report.f1, None);
        assert_eq!(report.false_negative_rate, Some(1.0));
    }

    #[test]
    fn hand_confusion_metrics() {
        let r = EvalReport::from_counts(99, 5, 895, 1);
        assert!((r.recall.unwrap() - 0.99).abs() < 1e-12);
        assert!((r.precision.unwrap() - 99.0 / 104.0).abs() < 1e-12);
        let p = 99.0 / 104.0;
        let rec = 0.99;
        assert!((r.f1.unwrap() - 2.0 * p * rec / (p + rec)).abs() < 1e-12);
        assert!(r.f1.unwrap() > 0.97 && r.f1.unwrap() < 0.975);
    }

    #[test]
    fn eval_report_csv_round_trip() {
        let r = EvalReport::from_counts(12, 3, 40, 2);
        let row = r.to_csv_row();
        let back = EvalReport::from_csv_row(&row).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn stratified_split_preserves_class_shares() {
        let matrix = toy_matrix(50);
        let (train_m, test_m) = split_train_test(&matrix, 0.3, 9);
        assert_eq!(train_m.rows.len() + test_m.rows.len(), matrix.rows.len());
        let ones = |m: &FeatureMatrix| m.rows.iter().filter(|r| r.label == 1).count();
        assert_eq!(ones(&test_m), 15);
        assert_eq!(ones(&train_m), 35);
        // Deterministic.
        let (train_b, _) = split_train_test(&matrix, 0.3, 9);
        assert_eq!(train_m.digest(), train_b.digest());
    }

    #[test]
    fn singleton_sweep_equals_direct_train_and_evaluate() {
        use crate::archive::{Archive, PathRecord, Provenance};
        use crate::hybrid::HybridPath;
        use crate::sim::{run_scenario, IndAdvBehavior, ScenarioConfig};

        let mut scenario = ScenarioConfig::reference();
        scenario.ind_adv_behavior = IndAdvBehavior::Scripted {
            moves: vec![1; 10],
            accels: vec![0.0; 10],
        };
        let ind = scenario.ind_adv_behavior.scripted_path().unwrap();
        let mut archive = Archive::new();
        // A handful of colliding and non-colliding records.
        for i in 0..6 {
            let (kind, path) = if i % 2 == 0 {
                (
                    PathKind::Perturbed,
                    HybridPath::new(
                        vec![1, 3, 0, 0, 0, 0, 0, 0, 0, 0],
                        vec![-2.0 - 0.1 * i as f64, -2.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                    )
                    .unwrap(),
                )
            } else {
                (
                    PathKind::Vanilla,
                    HybridPath::new(vec![1; 10], vec![0.1 * i as f64; 10]).unwrap(),
                )
            };
            let trace = run_scenario(&scenario, &path, &ind).unwrap();
            archive
                .insert(PathRecord {
                    id: format!("pair-{i:04}-{}", kind),
                    kind,
                    label: kind.label(),
                    path,
                    trace,
                    pair_id: Some(format!("pair-{i:04}")),
                    provenance: Provenance {
                        seed: i as u64,
                        iteration: 0,
                        params_digest: "0".repeat(16),
                    },
                })
                .unwrap();
        }
        let mix = std::collections::BTreeMap::from([
            (PathKind::Vanilla, 3usize),
            (PathKind::Perturbed, 3usize),
        ]);
        let dataset = crate::archive::compose_dataset(&archive, &mix).unwrap();
        let cfg = ForestConfig {
            n_trees: 7,
            ..ForestConfig::with_seed(5)
        };

        let rows = notice_sweep(&archive, &dataset, &[1.0], 2.0, 0.2, &cfg, 9).unwrap();
        assert_eq!(rows.len(), 1);
        let sweep_report = rows[0].report.as_ref().expect("feasible");

        let spec = WindowSpec::new(1.0, 2.0, 0.2).unwrap();
        let matrix = features::build_matrix(&archive, &dataset, &spec).unwrap();
        let (train_m, test_m) = split_train_test(&matrix, 0.3, 9);
        let model = train(&train_m, &cfg).unwrap();
        let direct = evaluate(&model, &test_m).unwrap();
        assert_eq!(*sweep_report, direct);
    }

    #[test]
    fn monitor_stride_and_shift_invariance() {
        use crate::hybrid::HybridPath;
        use crate::sim::{run_scenario, IndAdvBehavior, ScenarioConfig};

        let mut scenario = ScenarioConfig::reference();
        scenario.ind_adv_behavior = IndAdvBehavior::Scripted {
            moves: vec![1; 10],
            accels: vec![0.0; 10],
        };
        let ind = scenario.ind_adv_behavior.scripted_path().unwrap();
        let path = HybridPath::new(vec![1; 10], vec![0.0; 10]).unwrap();
        let trace = run_scenario(&scenario, &path, &ind).unwrap();

        let matrix = toy_matrix(10);
        let mut cfg = ForestConfig::with_seed(3);
        cfg.n_trees = 5;
        let mut model = train(&matrix, &cfg).unwrap();
        // Give the model the real trace's window shape.
        model.manifest.window = WindowSpec::new(1.0, 0.1, 0.1).unwrap();

        // Stride beyond the trace end: exactly one window.
        let log = monitor(&model, &trace, 100.0).unwrap();
        assert_eq!(log.len(), 1);

        // A steady-state cruise yields identical windows, hence identical
        // scores, at every anchor.
        let log = monitor(&model, &trace, 1.0).unwrap();
        assert!(log.len() > 3);
        let late: Vec<f64> = log.iter().skip(2).map(|(_, _, s)| *s).collect();
        assert!(
            late.windows(2).all(|w| w[0] == w[1]),
            "scores varied on a constant trace: {late:?}"
        );
    }

    #[test]
    fn ablation_partition_guard() {
        let archive = Archive::new();
        let spec = WindowSpec::new(1.0, 2.0, 0.5).unwrap();
        let err = ablation_eval(
            &archive,
            &[PathKind::Vanilla],
            &[PathKind::Vanilla],
            &spec,
            &ForestConfig::with_seed(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::BadPartition));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Metric identities hold for arbitrary confusion counts.
            #[test]
            fn metric_identities(tp in 0usize..500, fp in 0usize..500, tn in 0usize..500, fn_ in 0usize..500) {
                let r = EvalReport::from_counts(tp, fp, tn, fn_);
                if let (Some(p), Some(rec)) = (r.precision, r.recall) {
                    if p + rec > 0.0 {
                        let f1 = r.f1.unwrap();
                        prop_assert!((f1 - 2.0 * p * rec / (p + rec)).abs() < 1e-12);
                    }
                }
                if let Some(ba) = r.balanced_accuracy {
                    let se = tp as f64 / (tp + fn_) as f64;
                    let sp = tn as f64 / (tn + fp) as f64;
                    prop_assert!((ba - 0.5 * (se + sp)).abs() < 1e-12);
                }
                if let Some(fnr) = r.false_negative_rate {
                    let rec = r.recall.unwrap();
                    prop_assert!((fnr - (1.0 - rec)).abs() < 1e-12);
                }
            }

            /// score >= 0.5 iff label 1, for any vote pattern.
            #[test]
            fn vote_threshold_rule(ones in 0usize..20, zeros in 0usize..20) {
                prop_assume!(ones + zeros > 0);
                let spec = WindowSpec::new(0.0, 0.1, 0.1).unwrap();
                let leaf = |class: u8| Tree { nodes: vec![TreeNode::Leaf { class }] };
                let mut trees = vec![];
                trees.extend((0..ones).map(|_| leaf(1)));
                trees.extend((0..zeros).map(|_| leaf(0)));
                let model = ForestModel {
                    schema_digest: spec.schema_digest(),
                    manifest: TrainingManifest {
                        matrix_digest: String::new(),
                        source_digest: String::new(),
                        window: spec,
                        config: ForestConfig::with_seed(0),
                        rows: 0,
                    },
                    trees,
                };
                let row = vec![0.0; spec.row_len()];
                let (label, score) = model.predict(&row).unwrap();
                prop_assert_eq!(label == 1, score >= 0.5);
            }
        }
    }
}
