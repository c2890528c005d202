//! CSV ingestion for the real-time stream, the revision stream, and targets.

use super::{Array2, Array3, Dataset};
use crate::error::{Error, Result};
use crate::geo::{self, SpatialFeatures};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Deserialize)]
struct RealtimeRow {
    location_id: String,
    week: usize,
    feature: usize,
    value: f64,
}

#[derive(Deserialize)]
struct UpdateRow {
    location_id: String,
    target_week: usize,
    received_week: usize,
    feature: usize,
    value: f64,
}

#[derive(Deserialize)]
struct TargetRow {
    location_id: String,
    week: usize,
    value: f64,
}

fn schema_err(path: &Path, msg: String) -> Error {
    Error::BadSchema {
        file: path.display().to_string(),
        msg,
    }
}

/// Load a dataset directory: `locations.csv`, `realtime.csv`, `updates.csv`,
/// and optionally `targets.csv`. When multiple revisions target the same
/// cell, the latest received wins; cells that never got one carry the
/// real-time value with zero latency. Without a target file, the revised
/// `target_feature` series stands in as the prediction target.
pub fn load_dataset(dir: &Path, target_feature: usize) -> Result<Dataset> {
    let locations = geo::load_locations_csv(&dir.join("locations.csv"))?;
    let index = geo::id_index(&locations);
    load_dataset_with(dir, locations, &index, target_feature)
}

fn load_dataset_with(
    dir: &Path,
    locations: Vec<SpatialFeatures>,
    index: &BTreeMap<String, usize>,
    target_feature: usize,
) -> Result<Dataset> {
    let n = locations.len();
    let realtime_path = dir.join("realtime.csv");
    let mut rows = Vec::new();
    let mut reader = csv::Reader::from_path(&realtime_path)?;
    for record in reader.deserialize() {
        let row: RealtimeRow = record?;
        if !index.contains_key(&row.location_id) {
            return Err(Error::UnknownLocation(row.location_id));
        }
        if row.value < 0.0 {
            return Err(schema_err(
                &realtime_path,
                format!("negative count {} at week {}", row.value, row.week),
            ));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(schema_err(&realtime_path, "no rows".into()));
    }
    let t = rows.iter().map(|r| r.week).max().unwrap() + 1;
    let f = rows.iter().map(|r| r.feature).max().unwrap() + 1;

    let mut x = Array3::zeros(n, t, f);
    let mut seen = vec![false; n * t * f];
    for row in &rows {
        let i = index[&row.location_id];
        let cell = (i * t + row.week) * f + row.feature;
        if seen[cell] {
            return Err(schema_err(
                &realtime_path,
                format!(
                    "duplicate entry for ({}, week {}, feature {})",
                    row.location_id, row.week, row.feature
                ),
            ));
        }
        seen[cell] = true;
        x.set(i, row.week, row.feature, row.value);
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        let (i, rest) = (missing / (t * f), missing % (t * f));
        return Err(schema_err(
            &realtime_path,
            format!(
                "missing entry for ({}, week {}, feature {})",
                locations[i].id,
                rest / f,
                rest % f
            ),
        ));
    }

    // Revision stream: keep the latest received value per cell.
    let updates_path = dir.join("updates.csv");
    let mut u = x.clone();
    let mut revised = vec![false; n * t * f];
    let mut received = vec![0usize; n * t * f];
    let mut reader = csv::Reader::from_path(&updates_path)?;
    for record in reader.deserialize() {
        let row: UpdateRow = record?;
        let i = *index
            .get(&row.location_id)
            .ok_or_else(|| Error::UnknownLocation(row.location_id.clone()))?;
        if row.received_week < row.target_week {
            return Err(Error::RevisionFromPast {
                id: row.location_id,
                target_week: row.target_week,
                received_week: row.received_week,
            });
        }
        if row.target_week >= t || row.feature >= f {
            return Err(schema_err(
                &updates_path,
                format!(
                    "revision for (week {}, feature {}) outside the {}x{} grid",
                    row.target_week, row.feature, t, f
                ),
            ));
        }
        if row.value < 0.0 {
            return Err(schema_err(
                &updates_path,
                format!("negative count {} at week {}", row.value, row.target_week),
            ));
        }
        let cell = (i * t + row.target_week) * f + row.feature;
        if !revised[cell] || row.received_week >= received[cell] {
            revised[cell] = true;
            received[cell] = row.received_week;
            u.set(i, row.target_week, row.feature, row.value);
        }
    }

    let mut delta_t = Array2::zeros(n, t);
    for i in 0..n {
        for w in 0..t {
            let mut worst = 0usize;
            for k in 0..f {
                let cell = (i * t + w) * f + k;
                if revised[cell] {
                    worst = worst.max(received[cell] - w);
                }
            }
            delta_t.set(i, w, worst as f64);
        }
    }

    let targets_path = dir.join("targets.csv");
    let y = if targets_path.exists() {
        let mut y = Array2::zeros(n, t);
        let mut seen = vec![false; n * t];
        let mut reader = csv::Reader::from_path(&targets_path)?;
        for record in reader.deserialize() {
            let row: TargetRow = record?;
            let i = *index
                .get(&row.location_id)
                .ok_or_else(|| Error::UnknownLocation(row.location_id.clone()))?;
            if row.week >= t {
                return Err(schema_err(
                    &targets_path,
                    format!("target for week {} outside {} weeks", row.week, t),
                ));
            }
            seen[i * t + row.week] = true;
            y.set(i, row.week, row.value);
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(schema_err(
                &targets_path,
                format!(
                    "missing target for ({}, week {})",
                    locations[missing / t].id,
                    missing % t
                ),
            ));
        }
        y
    } else {
        if target_feature >= f {
            return Err(Error::Config(format!(
                "target feature {} out of range for {} features",
                target_feature, f
            )));
        }
        let mut y = Array2::zeros(n, t);
        for i in 0..n {
            for w in 0..t {
                y.set(i, w, u.at(i, w, target_feature));
            }
        }
        y
    };

    Ok(Dataset {
        locations,
        x,
        u,
        delta_t,
        revised,
        y,
    })
}

/// Carry real-time values into unrevised cells of a raw revision tensor.
/// Exposed for the entry-by-entry oracle tests; `load_dataset` applies the
/// same rule internally by starting from a copy of `x`.
pub fn fill_updates(u: &mut Array3, revised: &[bool], x: &Array3) {
    debug_assert_eq!(u.data.len(), revised.len());
    for (idx, flag) in revised.iter().enumerate() {
        if !flag {
            u.data[idx] = x.data[idx];
        }
    }
}
