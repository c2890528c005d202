//! Dataset ingestion, latency bookkeeping, normalization, and splits.

pub mod load;
pub mod synth;

use crate::error::{Error, Result};
use crate::geo::SpatialFeatures;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Row-major `n x t` matrix keyed by (location, week).
#[derive(Clone, Debug, PartialEq)]
pub struct Array2 {
    pub n: usize,
    pub t: usize,
    pub data: Vec<f64>,
}

impl Array2 {
    pub fn zeros(n: usize, t: usize) -> Self {
        Array2 {
            n,
            t,
            data: vec![0.0; n * t],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.t + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.t + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.t..(i + 1) * self.t]
    }
}

/// Row-major `n x t x f` tensor keyed by (location, week, feature).
#[derive(Clone, Debug, PartialEq)]
pub struct Array3 {
    pub n: usize,
    pub t: usize,
    pub f: usize,
    pub data: Vec<f64>,
}

impl Array3 {
    pub fn zeros(n: usize, t: usize, f: usize) -> Self {
        Array3 {
            n,
            t,
            f,
            data: vec![0.0; n * t * f],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.t + j) * self.f + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.t + j) * self.f + k] = v;
    }

    /// The `[f]` slice at (location, week).
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.t + j) * self.f;
        &self.data[base..base + self.f]
    }
}

/// A loaded corpus in raw units. `u` is fully filled: entries without a
/// revision carry the real-time value (`revised` = false there).
pub struct Dataset {
    pub locations: Vec<SpatialFeatures>,
    pub x: Array3,
    pub u: Array3,
    /// Per (location, week): worst revision latency in whole weeks across
    /// features; 0 where nothing was revised.
    pub delta_t: Array2,
    /// `n x t x f` flags marking entries that received a revision.
    pub revised: Vec<bool>,
    /// Target series per location; falls back to the revised target feature
    /// when no explicit target file exists.
    pub y: Array2,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.n
    }
    pub fn t(&self) -> usize {
        self.x.t
    }
    pub fn f(&self) -> usize {
        self.x.f
    }
}

// ── splits ──────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Standard,
    Iterative,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct IterativePhases {
    pub original_train: Range<usize>,
    pub deploy: Range<usize>,
    pub refresh: Range<usize>,
    pub final_test: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub iterative: Option<IterativePhases>,
}

fn scaled(t: usize, fraction: f64) -> usize {
    (t as f64 * fraction).round() as usize
}

/// Standard mode scales the 60/20/20-week split proportionally; iterative
/// mode scales the week 1-50 / 50-80 / 60-80 / 80-100 phases.
pub fn split_dataset(t: usize, mode: SplitMode) -> Result<DatasetSplit> {
    if t < 5 {
        return Err(Error::BadSplit(format!("{} weeks is too short to split", t)));
    }
    match mode {
        SplitMode::Standard => {
            let t1 = scaled(t, 0.6);
            let t2 = scaled(t, 0.8);
            Ok(DatasetSplit {
                train: 0..t1,
                val: t1..t2,
                test: t2..t,
                iterative: None,
            })
        }
        SplitMode::Iterative => {
            let t50 = scaled(t, 0.5);
            let t60 = scaled(t, 0.6);
            let t80 = scaled(t, 0.8);
            let phases = IterativePhases {
                original_train: 0..t50,
                deploy: t50..t80,
                refresh: t60..t80,
                final_test: t80..t,
            };
            Ok(DatasetSplit {
                train: phases.original_train.clone(),
                val: phases.deploy.clone(),
                test: phases.final_test.clone(),
                iterative: Some(phases),
            })
        }
    }
}

// ── normalization ───────────────────────────────────────────────────────

pub const STD_FLOOR: f64 = 1e-8;

/// Static location fields fed to the spatial embedding, in column order.
pub const STATIC_FIELDS: [&str; 6] = [
    "population",
    "hospitals",
    "icu_beds",
    "longitude",
    "latitude",
    "income",
];

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Stats {
    fn from_series<I: Iterator<Item = f64> + Clone>(series: I) -> (f64, f64, bool) {
        let (mut sum, mut count) = (0.0, 0usize);
        for v in series.clone() {
            sum += v;
            count += 1;
        }
        let mean = sum / count as f64;
        let mut var = 0.0;
        for v in series {
            var += (v - mean) * (v - mean);
        }
        let std = (var / count as f64).sqrt();
        if std < STD_FLOOR {
            (mean, STD_FLOOR, true)
        } else {
            (mean, std, false)
        }
    }
}

/// Per-location statistics computed on the training range only. `x`/`u` are
/// per (location, feature); `y` per location; `statics` per static field
/// across locations.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct Normalizer {
    pub x: Stats,
    pub u: Stats,
    pub y: Stats,
    pub statics: Stats,
    pub floored: usize,
    pub target_feature: usize,
    pub f: usize,
}

impl Normalizer {
    pub fn denormalize_y(&self, location: usize, value: f64) -> f64 {
        value * self.y.std[location] + self.y.mean[location]
    }

    pub fn normalize_y(&self, location: usize, value: f64) -> f64 {
        (value - self.y.mean[location]) / self.y.std[location]
    }
}

/// Everything the models consume, in normalized units except `delta_t`.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub x: Array3,
    pub u: Array3,
    pub y: Array2,
    /// Auxiliary target: the revised target-feature series.
    pub y_u: Array2,
    pub delta_t: Array2,
    /// `n x STATIC_FIELDS.len()` standardized static features.
    pub statics: Vec<f64>,
    pub normalizer: Normalizer,
}

fn static_value(f: &SpatialFeatures, field: usize, income_default: f64) -> f64 {
    match field {
        0 => f.population,
        1 => f.hospitals,
        2 => f.icu_beds,
        3 => f.longitude,
        4 => f.latitude,
        _ => f.income.unwrap_or(income_default),
    }
}

/// Normalize a dataset with statistics from `train` only: per-location
/// per-feature z-scores for both streams, per-location z-scores for targets,
/// per-field z-scores for the static table. Missing income is imputed with
/// the mean of the present values when `impute_missing` is set and is a hard
/// error otherwise.
pub fn prepare_inputs(
    ds: &Dataset,
    train: &Range<usize>,
    target_feature: usize,
    impute_missing: bool,
) -> Result<ModelInputs> {
    let (n, t, f) = (ds.n(), ds.t(), ds.f());
    if train.start >= train.end || train.end > t {
        return Err(Error::BadSplit(format!(
            "training range {:?} does not fit {} weeks",
            train, t
        )));
    }
    if target_feature >= f {
        return Err(Error::Config(format!(
            "target feature {} out of range for {} features",
            target_feature, f
        )));
    }

    let mut floored = 0;
    let mut fit = |series: &mut dyn Iterator<Item = f64>| -> (f64, f64) {
        let collected: Vec<f64> = series.collect();
        let (mean, std, hit) = Stats::from_series(collected.iter().cloned());
        if hit {
            floored += 1;
        }
        (mean, std)
    };

    let mut x_stats = Stats {
        mean: vec![0.0; n * f],
        std: vec![0.0; n * f],
    };
    let mut u_stats = x_stats.clone();
    let mut y_stats = Stats {
        mean: vec![0.0; n],
        std: vec![0.0; n],
    };
    for i in 0..n {
        for k in 0..f {
            let (m, s) = fit(&mut train.clone().map(|w| ds.x.at(i, w, k)));
            (x_stats.mean[i * f + k], x_stats.std[i * f + k]) = (m, s);
            let (m, s) = fit(&mut train.clone().map(|w| ds.u.at(i, w, k)));
            (u_stats.mean[i * f + k], u_stats.std[i * f + k]) = (m, s);
        }
        let (m, s) = fit(&mut train.clone().map(|w| ds.y.at(i, w)));
        (y_stats.mean[i], y_stats.std[i]) = (m, s);
    }

    let income_present: Vec<f64> = ds.locations.iter().filter_map(|l| l.income).collect();
    if income_present.len() < n && !impute_missing {
        return Err(Error::Config(
            "missing income values; pass the imputation flag to default them".into(),
        ));
    }
    let income_default = if income_present.is_empty() {
        0.0
    } else {
        income_present.iter().sum::<f64>() / income_present.len() as f64
    };

    let s_dim = STATIC_FIELDS.len();
    let mut statics_stats = Stats {
        mean: vec![0.0; s_dim],
        std: vec![0.0; s_dim],
    };
    for field in 0..s_dim {
        let (m, s) = fit(
            &mut ds
                .locations
                .iter()
                .map(|l| static_value(l, field, income_default)),
        );
        (statics_stats.mean[field], statics_stats.std[field]) = (m, s);
    }
    if floored > 0 {
        log::warn!("{} zero-variance series floored to std {}", floored, STD_FLOOR);
    }

    let normalizer = Normalizer {
        x: x_stats,
        u: u_stats,
        y: y_stats,
        statics: statics_stats,
        floored,
        target_feature,
        f,
    };

    let mut x = Array3::zeros(n, t, f);
    let mut u = Array3::zeros(n, t, f);
    let mut y = Array2::zeros(n, t);
    let mut y_u = Array2::zeros(n, t);
    for i in 0..n {
        for w in 0..t {
            for k in 0..f {
                x.set(
                    i,
                    w,
                    k,
                    (ds.x.at(i, w, k) - normalizer.x.mean[i * f + k]) / normalizer.x.std[i * f + k],
                );
                u.set(
                    i,
                    w,
                    k,
                    (ds.u.at(i, w, k) - normalizer.u.mean[i * f + k]) / normalizer.u.std[i * f + k],
                );
            }
            y.set(i, w, normalizer.normalize_y(i, ds.y.at(i, w)));
            y_u.set(i, w, normalizer.normalize_y(i, ds.u.at(i, w, target_feature)));
        }
    }
    let mut statics = vec![0.0; n * s_dim];
    for (i, loc) in ds.locations.iter().enumerate() {
        for field in 0..s_dim {
            statics[i * s_dim + field] = (static_value(loc, field, income_default)
                - normalizer.statics.mean[field])
                / normalizer.statics.std[field];
        }
    }

    Ok(ModelInputs {
        x,
        u,
        y,
        y_u,
        delta_t: ds.delta_t.clone(),
        statics,
        normalizer,
    })
}
