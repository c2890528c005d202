//! Full-batch Adam training with a three-checkpoint retention policy:
//! lowest train loss, lowest validation MSE, and the final state. Each
//! checkpoint is tested and the best result reported.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use lfnet_autodiff::{Adam, AdamConfig, EdgeIndex, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{compute_metrics, MetricSet};
use crate::data::{DatasetSplit, ModelInputs};
use crate::error::{Error, Result};
use crate::model::{BaselineGru, ForwardOptions, ForwardRun, LatencyNet, WindowSpec};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Drives parameter initialization upstream and the dropout masks here.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 200,
            seed: 42,
        }
    }
}

/// Anything the trainer can fit: a named parameter set plus a differentiable
/// forward pass over a window of weeks.
pub trait Forecaster {
    fn params(&self) -> &BTreeMap<String, Tensor>;
    fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor>;
    fn horizon(&self) -> usize;
    fn run(
        &self,
        inputs: &ModelInputs,
        edges: &Arc<EdgeIndex>,
        spec: &WindowSpec,
        opts: ForwardOptions,
    ) -> Result<ForwardRun>;
}

impl Forecaster for LatencyNet {
    fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }
    fn horizon(&self) -> usize {
        self.config.horizon
    }
    fn run(
        &self,
        inputs: &ModelInputs,
        edges: &Arc<EdgeIndex>,
        spec: &WindowSpec,
        opts: ForwardOptions,
    ) -> Result<ForwardRun> {
        self.forward(inputs, edges, spec, opts)
    }
}

impl Forecaster for BaselineGru {
    fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }
    fn horizon(&self) -> usize {
        self.config.horizon
    }
    fn run(
        &self,
        inputs: &ModelInputs,
        _edges: &Arc<EdgeIndex>,
        spec: &WindowSpec,
        opts: ForwardOptions,
    ) -> Result<ForwardRun> {
        self.forward(inputs, spec, opts)
    }
}

/// The three windows of one training run. Evaluation windows start at the
/// training window's start (or week 0) so the recurrent state crosses into
/// the scored stretch instead of starting cold there.
#[derive(Clone, Debug)]
pub struct TrainPlan {
    pub train: WindowSpec,
    pub val: WindowSpec,
    pub test: WindowSpec,
    /// Warm-start hidden states applied to every window of the run.
    pub initial_hidden: Option<(Tensor, Tensor)>,
}

impl TrainPlan {
    pub fn standard(split: &DatasetSplit) -> Result<TrainPlan> {
        Ok(TrainPlan {
            train: WindowSpec::full(split.train.clone())?,
            val: WindowSpec::new(split.train.start..split.val.end, split.val.clone())?,
            test: WindowSpec::new(split.train.start..split.test.end, split.test.clone())?,
            initial_hidden: None,
        })
    }
}

pub struct Checkpoint {
    pub slot: &'static str,
    /// Epoch the snapshot was taken at; the initial state counts as 0.
    pub epoch: usize,
    /// The value that won the slot (train loss or validation MSE), absent
    /// for the final state and for never-measured degenerate runs.
    pub criterion: Option<f64>,
    pub params: BTreeMap<String, Tensor>,
}

pub struct TrainReport {
    pub train_losses: Vec<f64>,
    /// Denormalized validation MSE per epoch.
    pub val_mse: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub wall_secs: f64,
    pub secs_per_epoch: f64,
    pub peak_tape_bytes: usize,
    pub diverged_at: Option<usize>,
    /// Exactly three: lowest-train, lowest-val, last.
    pub checkpoints: Vec<Checkpoint>,
    /// Test metrics per checkpoint, same order.
    pub test_metrics: Vec<MetricSet>,
    /// Index of the checkpoint with the lowest test MAE.
    pub best: usize,
}

impl TrainReport {
    pub fn best_metrics(&self) -> &MetricSet {
        &self.test_metrics[self.best]
    }

    pub fn best_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.best]
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Run a model over a window without dropout and score the window's range.
pub fn evaluate<M: Forecaster>(
    model: &M,
    inputs: &ModelInputs,
    edges: &Arc<EdgeIndex>,
    window: &WindowSpec,
    initial_hidden: Option<(Tensor, Tensor)>,
) -> Result<(MetricSet, ForwardRun)> {
    let run = model.run(
        inputs,
        edges,
        window,
        ForwardOptions {
            initial_hidden,
            ..Default::default()
        },
    )?;
    let metrics = compute_metrics(&run.predictions, inputs, &window.score, model.horizon())?;
    Ok((metrics, run))
}

/// A mid-training activation overflow counts as divergence; a non-finite
/// value already present in the inputs stays a hard error.
fn diverged(e: &Error) -> bool {
    matches!(e, Error::NonFiniteStep { stage, .. } if *stage != "input")
}

pub fn train<M: Forecaster>(
    model: &mut M,
    inputs: &ModelInputs,
    edges: &Arc<EdgeIndex>,
    plan: &TrainPlan,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let init = model.params().clone();

    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut val_mse = Vec::with_capacity(cfg.epochs);
    let mut grad_norms = Vec::with_capacity(cfg.epochs);
    let mut best_train: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    let mut best_val: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    // Most recent parameters that produced a finite loss; the "last"
    // checkpoint falls back to these when training diverges.
    let mut last_good = (0usize, init.clone());
    let mut diverged_at = None;
    let mut peak_tape_bytes = 0usize;

    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let opts = ForwardOptions {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(cfg.seed ^ splitmix(epoch as u64))),
            collect_attention: false,
            initial_hidden: plan.initial_hidden.clone(),
        };
        let run = match model.run(inputs, edges, &plan.train, opts) {
            Ok(run) => run,
            Err(e) if diverged(&e) => {
                diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = run.tape.value(run.loss).data()[0];
        if !loss.is_finite() {
            diverged_at = Some(epoch);
            break;
        }

        let val = match evaluate(model, inputs, edges, &plan.val, plan.initial_hidden.clone()) {
            Ok((metrics, val_run)) => {
                peak_tape_bytes = peak_tape_bytes.max(val_run.tape.peak_bytes());
                metrics.rmse * metrics.rmse
            }
            Err(e) if diverged(&e) => {
                diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };

        let snapshot = model.params().clone();
        if best_train.as_ref().map_or(true, |(best, _, _)| loss < *best) {
            best_train = Some((loss, epoch, snapshot.clone()));
        }
        if best_val.as_ref().map_or(true, |(best, _, _)| val < *best) {
            best_val = Some((val, epoch, snapshot.clone()));
        }
        last_good = (epoch, snapshot);

        let mut run = run;
        run.tape.backward(run.loss)?;
        let mut grads = BTreeMap::new();
        let mut norm_sq = 0.0;
        for (name, var) in &run.vars {
            let g = run.tape.grad_or_zeros(*var);
            norm_sq += g.iter().map(|v| v * v).sum::<f64>();
            grads.insert(name.clone(), g);
        }
        let grad_norm = norm_sq.sqrt();
        train_losses.push(loss);
        val_mse.push(val);
        grad_norms.push(grad_norm);
        peak_tape_bytes = peak_tape_bytes.max(run.tape.peak_bytes());
        log::debug!(
            "epoch {epoch}: loss {loss:.6} val mse {val:.6} grad norm {grad_norm:.4}"
        );
        if !grad_norm.is_finite() {
            diverged_at = Some(epoch);
            break;
        }
        opt.step(model.params_mut(), &grads)?;
    }
    let wall_secs = started.elapsed().as_secs_f64();
    let epochs_run = train_losses.len();
    if let Some(epoch) = diverged_at {
        log::warn!("training diverged at epoch {epoch}; keeping the last finite state");
    }

    let last = if diverged_at.is_some() {
        Checkpoint {
            slot: "last",
            epoch: last_good.0,
            criterion: None,
            params: last_good.1,
        }
    } else {
        Checkpoint {
            slot: "last",
            epoch: cfg.epochs,
            criterion: None,
            params: model.params().clone(),
        }
    };
    let from_best = |slot, best: Option<(f64, usize, BTreeMap<String, Tensor>)>| match best {
        Some((value, epoch, params)) => Checkpoint {
            slot,
            epoch,
            criterion: Some(value),
            params,
        },
        None => Checkpoint {
            slot,
            epoch: 0,
            criterion: None,
            params: init.clone(),
        },
    };
    let checkpoints = vec![
        from_best("lowest-train", best_train),
        from_best("lowest-val", best_val),
        last,
    ];

    let mut test_metrics = Vec::with_capacity(checkpoints.len());
    for cp in &checkpoints {
        *model.params_mut() = cp.params.clone();
        let (metrics, _) = evaluate(model, inputs, edges, &plan.test, plan.initial_hidden.clone())?;
        test_metrics.push(metrics);
    }
    let best = (0..test_metrics.len())
        .min_by(|&a, &b| test_metrics[a].mae.total_cmp(&test_metrics[b].mae))
        .unwrap();
    *model.params_mut() = checkpoints[best].params.clone();

    Ok(TrainReport {
        train_losses,
        val_mse,
        grad_norms,
        wall_secs,
        secs_per_epoch: if epochs_run == 0 {
            0.0
        } else {
            wall_secs / epochs_run as f64
        },
        peak_tape_bytes,
        diverged_at,
        checkpoints,
        test_metrics,
        best,
    })
}
