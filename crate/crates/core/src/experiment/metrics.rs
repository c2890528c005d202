//! Denormalized evaluation metrics and the per-location winner table.

use std::ops::Range;

use lfnet_autodiff::Tensor;

use crate::data::ModelInputs;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Targets this close to zero (in raw units) stay out of the percentage
/// error; raw integer counts of zero land here after a normalization round
/// trip.
const ZERO_TARGET: f64 = 1e-9;

/// All values are in raw units. `mape` is in percent. Locations whose
/// scored targets are all zero report a per-location MAPE of zero; the
/// global `mape_excluded` counts every skipped point.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct MetricSet {
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub per_location_mae: Vec<f64>,
    pub per_location_rmse: Vec<f64>,
    pub per_location_mape: Vec<f64>,
    pub per_horizon_mae: Vec<f64>,
    pub mape_excluded: usize,
    pub pairs: usize,
}

/// Score predictions against the targets of the given range, after
/// projecting both back to raw units. `predictions` pairs each window step
/// with its `[N, horizon]` normalized outputs, as the forward passes
/// produce; the (week, horizon) pairing rule matches the training losses.
pub fn compute_metrics(
    predictions: &[(usize, Tensor)],
    inputs: &ModelInputs,
    score: &Range<usize>,
    horizon: usize,
) -> Result<MetricSet> {
    let n = inputs.x.n;
    let norm = &inputs.normalizer;
    let mut sq = vec![0.0; n];
    let mut abs = vec![0.0; n];
    let mut pct = vec![0.0; n];
    let mut count = vec![0usize; n];
    let mut pct_count = vec![0usize; n];
    let mut hz_abs = vec![0.0; horizon];
    let mut hz_count = vec![0usize; horizon];

    for (week, pred) in predictions {
        if pred.shape() != [n, horizon] {
            return Err(Error::Model(format!(
                "predictions at week {week} have shape {:?}, expected [{n}, {horizon}]",
                pred.shape()
            )));
        }
        for hz in 1..=horizon {
            let target_week = week + hz;
            if target_week < score.start || target_week >= score.end || target_week >= inputs.y.t
            {
                continue;
            }
            for i in 0..n {
                let y_hat = norm.denormalize_y(i, pred.data()[i * horizon + hz - 1]);
                let y = norm.denormalize_y(i, inputs.y.at(i, target_week));
                let err = y_hat - y;
                sq[i] += err * err;
                abs[i] += err.abs();
                count[i] += 1;
                hz_abs[hz - 1] += err.abs();
                hz_count[hz - 1] += 1;
                if y.abs() > ZERO_TARGET {
                    pct[i] += (err / y).abs();
                    pct_count[i] += 1;
                }
            }
        }
    }

    let pairs: usize = count.iter().sum();
    if pairs == 0 {
        return Err(Error::Model("no scored (week, horizon) pairs".into()));
    }
    let total_sq: f64 = sq.iter().sum();
    let total_abs: f64 = abs.iter().sum();
    let total_pct: f64 = pct.iter().sum();
    let pct_pairs: usize = pct_count.iter().sum();

    let per_loc = |num: &[f64], den: &[usize]| -> Vec<f64> {
        num.iter()
            .zip(den)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    };

    Ok(MetricSet {
        rmse: (total_sq / pairs as f64).sqrt(),
        mae: total_abs / pairs as f64,
        mape: if pct_pairs == 0 {
            0.0
        } else {
            100.0 * total_pct / pct_pairs as f64
        },
        per_location_rmse: sq
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64).sqrt() })
            .collect(),
        per_location_mae: per_loc(&abs, &count),
        per_location_mape: pct
            .iter()
            .zip(&pct_count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { 100.0 * s / c as f64 })
            .collect(),
        per_horizon_mae: per_loc(&hz_abs, &hz_count),
        mape_excluded: pairs - pct_pairs,
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct WinnerRow {
    pub model: String,
    pub wins: usize,
    pub win_pct: f64,
    /// Mean over won locations of (runner-up MAPE - winner MAPE).
    pub mean_delta_mape: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct WinnerTable {
    /// One row per model, in input order.
    pub rows: Vec<WinnerRow>,
    /// Winning model index per location.
    pub winner_per_location: Vec<usize>,
}

/// Rank models per location by MAE; ties fall to the lower per-location
/// RMSE, then the lexicographically smaller name.
pub fn per_location_report(models: &[(String, MetricSet)]) -> Result<WinnerTable> {
    if models.len() < 2 {
        return Err(Error::Config("winner table needs at least two models".into()));
    }
    let n = models[0].1.per_location_mae.len();
    for (name, m) in models {
        if m.per_location_mae.len() != n {
            return Err(Error::Config(format!(
                "model {name} reports {} locations, expected {n}",
                m.per_location_mae.len()
            )));
        }
    }

    let mut wins = vec![0usize; models.len()];
    let mut delta_sum = vec![0.0; models.len()];
    let mut winner_per_location = Vec::with_capacity(n);
    for loc in 0..n {
        let mut order: Vec<usize> = (0..models.len()).collect();
        order.sort_by(|&a, &b| {
            let (na, ma) = &models[a];
            let (nb, mb) = &models[b];
            ma.per_location_mae[loc]
                .total_cmp(&mb.per_location_mae[loc])
                .then(ma.per_location_rmse[loc].total_cmp(&mb.per_location_rmse[loc]))
                .then(na.cmp(nb))
        });
        let (winner, runner_up) = (order[0], order[1]);
        wins[winner] += 1;
        delta_sum[winner] +=
            models[runner_up].1.per_location_mape[loc] - models[winner].1.per_location_mape[loc];
        winner_per_location.push(winner);
    }

    let rows = models
        .iter()
        .enumerate()
        .map(|(idx, (name, _))| WinnerRow {
            model: name.clone(),
            wins: wins[idx],
            win_pct: 100.0 * wins[idx] as f64 / n as f64,
            mean_delta_mape: if wins[idx] == 0 {
                0.0
            } else {
                delta_sum[idx] / wins[idx] as f64
            },
        })
        .collect();
    Ok(WinnerTable {
        rows,
        winner_per_location,
    })
}

/// Mean and sample standard deviation (n - 1); a single value has zero
/// spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "mean of nothing");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
