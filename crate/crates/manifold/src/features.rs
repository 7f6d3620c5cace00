//! Windowed feature extraction over traces.
//!
//! Rows are anchored at a collision time (or a reference anchor for records
//! that never collide), then sampled backwards: a gap of `X` seconds before
//! the anchor, a window of `Y` seconds before that, sampled every `R`
//! seconds inclusive of both ends. Each sampled instant contributes 33
//! features: three pairwise (distance, angle) geometries plus velocity,
//! acceleration, and angular velocity for each of the three vehicles.
//!
//! Both siblings of a pair are sampled at the pair's collision time, so a
//! vanilla row and its perturbed counterpart cover identical absolute
//! times; the window never reaches past `anchor - X`, keeping the collision
//! itself out of the row.

use serde::{Deserialize, Serialize};

use crate::archive::{Archive, DatasetHandle, PathKind, PathRecord};
use crate::digest::Hasher;
use crate::error::{Error, Result};
use crate::sim::{relative_geometry, SimTrace};

/// Features collected at every sampled timestep.
pub const FEATURES_PER_STEP: usize = 33;

/// Per-timestep feature names, in row order.
pub const FEATURE_NAMES: [&str; FEATURES_PER_STEP] = [
    "ego_adv_distance",
    "ego_adv_angle",
    "ego_ind_adv_distance",
    "ego_ind_adv_angle",
    "adv_ind_adv_distance",
    "adv_ind_adv_angle",
    "ego_vel_x",
    "ego_vel_y",
    "ego_vel_z",
    "ego_accel_x",
    "ego_accel_y",
    "ego_accel_z",
    "ego_ang_vel_x",
    "ego_ang_vel_y",
    "ego_ang_vel_z",
    "adv_vel_x",
    "adv_vel_y",
    "adv_vel_z",
    "adv_accel_x",
    "adv_accel_y",
    "adv_accel_z",
    "adv_ang_vel_x",
    "adv_ang_vel_y",
    "adv_ang_vel_z",
    "ind_adv_vel_x",
    "ind_adv_vel_y",
    "ind_adv_vel_z",
    "ind_adv_accel_x",
    "ind_adv_accel_y",
    "ind_adv_accel_z",
    "ind_adv_ang_vel_x",
    "ind_adv_ang_vel_y",
    "ind_adv_ang_vel_z",
];

/// The `X`/`Y`/`R` window: gap before the anchor, window length, and
/// sampling period, all in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Seconds between the end of the window and the anchor (X).
    pub gap: f64,
    /// Window length in seconds (Y).
    pub length: f64,
    /// Sampling period in seconds (R).
    pub period: f64,
}

impl WindowSpec {
    pub fn new(gap: f64, length: f64, period: f64) -> Result<Self> {
        let spec = Self {
            gap,
            length,
            period,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gap < 0.0 || self.length <= 0.0 || self.period <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "window".into(),
                reason: format!(
                    "gap {} must be >= 0 and length {} / period {} positive",
                    self.gap, self.length, self.period
                ),
            });
        }
        let ratio = self.length / self.period;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::InvalidParameter {
                name: "window".into(),
                reason: format!("length/period = {ratio} must be integral"),
            });
        }
        Ok(())
    }

    /// Sampled instants per row: `Y/R + 1` (both window ends inclusive).
    pub fn samples_per_row(&self) -> usize {
        (self.length / self.period).round() as usize + 1
    }

    /// Flattened row length: `33 * (Y/R + 1)`.
    pub fn row_len(&self) -> usize {
        FEATURES_PER_STEP * self.samples_per_row()
    }

    /// Sample times for a given anchor, ascending.
    pub fn sample_times(&self, anchor: f64) -> Vec<f64> {
        let start = anchor - self.gap - self.length;
        (0..self.samples_per_row())
            .map(|k| start + k as f64 * self.period)
            .collect()
    }

    /// Column names: feature names suffixed by sample index.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.row_len());
        for k in 0..self.samples_per_row() {
            for f in FEATURE_NAMES {
                names.push(format!("{f}_{k}"));
            }
        }
        names
    }

    /// Digest of the column layout; models refuse rows from a different
    /// schema.
    pub fn schema_digest(&self) -> String {
        let mut h = Hasher::new();
        for name in self.column_names() {
            h.update(name.as_bytes());
            h.update(b",");
        }
        h.finish_hex()
    }
}

/// One flattened, labeled feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub values: Vec<f64>,
    pub label: u8,
    pub source_id: String,
    pub anchor_time: f64,
}

/// A labeled feature matrix with its window and provenance digests.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub spec: WindowSpec,
    pub rows: Vec<FeatureRow>,
    /// Digest of the dataset the rows were extracted from.
    pub source_digest: String,
}

impl FeatureMatrix {
    pub fn schema_digest(&self) -> String {
        self.spec.schema_digest()
    }

    /// Stable digest over the matrix content.
    pub fn digest(&self) -> String {
        let mut h = Hasher::new();
        h.update(self.schema_digest().as_bytes());
        for row in &self.rows {
            for v in &row.values {
                h.update(&v.to_bits().to_le_bytes());
            }
            h.update(&[row.label]);
        }
        h.finish_hex()
    }

    /// Comma-separated text: `#` metadata lines, a header of suffixed
    /// feature names plus a final `label` column, then one row per record.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# manifold-features v1\n");
        out.push_str(&format!(
            "# window gap={:?} length={:?} period={:?}\n",
            self.spec.gap, self.spec.length, self.spec.period
        ));
        out.push_str(&format!(
            "# source_digest={} schema_digest={}\n",
            self.source_digest,
            self.schema_digest()
        ));
        let mut header = self.spec.column_names().join(",");
        header.push_str(",label");
        out.push_str(&header);
        out.push('\n');
        for row in &self.rows {
            for v in &row.values {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{}\n", row.label));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<FeatureMatrix> {
        let malformed = |detail: String| Error::Malformed {
            what: "feature matrix".into(),
            detail,
        };
        let mut spec: Option<WindowSpec> = None;
        let mut source_digest = String::new();
        let mut rows = Vec::new();
        let mut expected_cols = None;

        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let mut gap = None;
                let mut length = None;
                let mut period = None;
                for kv in meta.split_whitespace() {
                    if let Some((k, v)) = kv.split_once('=') {
                        match k {
                            "gap" => gap = v.parse().ok(),
                            "length" => length = v.parse().ok(),
                            "period" => period = v.parse().ok(),
                            "source_digest" => source_digest = v.to_string(),
                            _ => {}
                        }
                    }
                }
                if let (Some(g), Some(l), Some(p)) = (gap, length, period) {
                    spec = Some(WindowSpec::new(g, l, p)?);
                }
                continue;
            }
            if expected_cols.is_none() {
                let s =
                    spec.ok_or_else(|| malformed("missing window metadata before header".into()))?;
                let mut header = s.column_names().join(",");
                header.push_str(",label");
                if line != header {
                    return Err(malformed("header does not match declared window".into()));
                }
                expected_cols = Some(s.row_len() + 1);
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected_cols.unwrap() {
                return Err(malformed(format!(
                    "row has {} fields, expected {}",
                    fields.len(),
                    expected_cols.unwrap()
                )));
            }
            let values: Vec<f64> = fields[..fields.len() - 1]
                .iter()
                .map(|f| f.parse().map_err(|_| malformed(format!("bad value {f}"))))
                .collect::<Result<_>>()?;
            let label: u8 = fields[fields.len() - 1]
                .parse()
                .map_err(|_| malformed("bad label".into()))?;
            rows.push(FeatureRow {
                values,
                label,
                source_id: String::new(),
                anchor_time: f64::NAN,
            });
        }
        Ok(FeatureMatrix {
            spec: spec.ok_or_else(|| malformed("missing window metadata".into()))?,
            rows,
            source_digest,
        })
    }
}

/// Resolve the anchor for one record. Collision kinds anchor at their own
/// collision; paired non-collision kinds at the pair's collision; anything
/// else at the supplied context or, failing that, one second before the end
/// of its trace.
pub fn anchor_time(record: &PathRecord, pair_context: Option<f64>) -> Result<f64> {
    match record.kind {
        PathKind::Perturbed | PathKind::VariantPerturbed => {
            record.trace.t_collision.ok_or_else(|| Error::InconsistentRecord {
                id: record.id.clone(),
                reason: "collision kind without t_collision".into(),
            })
        }
        PathKind::Vanilla | PathKind::VariantVanilla | PathKind::Rudimentary => {
            Ok(pair_context.unwrap_or(record.trace.end_time() - 1.0))
        }
    }
}

/// The 33 features at one sampled instant.
pub fn features_at(trace: &SimTrace, t: f64) -> Result<[f64; FEATURES_PER_STEP]> {
    let s = trace.sample_at(t)?;
    let (d_ea, a_ea) = relative_geometry(&s.ego, &s.adv);
    let (d_ei, a_ei) = relative_geometry(&s.ego, &s.ind_adv);
    let (d_ai, a_ai) = relative_geometry(&s.adv, &s.ind_adv);
    let mut out = [0.0; FEATURES_PER_STEP];
    out[0] = d_ea;
    out[1] = a_ea;
    out[2] = d_ei;
    out[3] = a_ei;
    out[4] = d_ai;
    out[5] = a_ai;
    let mut i = 6;
    for v in [&s.ego, &s.adv, &s.ind_adv] {
        for arr in [v.velocity, v.acceleration, v.angular_velocity] {
            out[i] = arr[0];
            out[i + 1] = arr[1];
            out[i + 2] = arr[2];
            i += 3;
        }
    }
    Ok(out)
}

/// Flattened window values from a raw trace (time-major).
pub fn extract_window(trace: &SimTrace, spec: &WindowSpec, anchor: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    let start = anchor - spec.gap - spec.length;
    let end = anchor - spec.gap;
    if start < -1e-9 || end > trace.end_time() + 1e-9 {
        return Err(Error::WindowOutOfRange {
            start,
            end,
            trace_end: trace.end_time(),
        });
    }
    let mut values = Vec::with_capacity(spec.row_len());
    for t in spec.sample_times(anchor) {
        values.extend_from_slice(&features_at(trace, t)?);
    }
    Ok(values)
}

/// One labeled row for a record.
pub fn extract(record: &PathRecord, spec: &WindowSpec, anchor: f64) -> Result<FeatureRow> {
    let values = extract_window(&record.trace, spec, anchor)?;
    Ok(FeatureRow {
        values,
        label: record.label,
        source_id: record.id.clone(),
        anchor_time: anchor,
    })
}

/// One row per dataset record, in dataset order. Any extraction failure
/// aborts, naming the offending record.
pub fn build_matrix(
    archive: &Archive,
    dataset: &DatasetHandle,
    spec: &WindowSpec,
) -> Result<FeatureMatrix> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(dataset.record_ids.len());
    for id in &dataset.record_ids {
        let record = archive
            .get(id)
            .ok_or_else(|| Error::MissingArtifact(format!("record {id}")))?;
        let pair_context = archive.pair_collision_time(record);
        let row = anchor_time(record, pair_context)
            .and_then(|anchor| extract(record, spec, anchor))
            .map_err(|e| Error::Extraction {
                id: id.clone(),
                source: Box::new(e),
            })?;
        rows.push(row);
    }
    Ok(FeatureMatrix {
        spec: *spec,
        rows,
        source_digest: dataset.digest.clone(),
    })
}
