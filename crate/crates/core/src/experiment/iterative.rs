//! Deployment simulation: train on the original stretch, refresh only on
//! newly collected weeks with warm-started hidden states, and compare
//! against the cold-start ablation and full-history retraining.

use std::ops::Range;
use std::sync::Arc;

use lfnet_autodiff::EdgeIndex;

use super::metrics::MetricSet;
use super::train::{train, TrainConfig, TrainPlan, TrainReport};
use crate::data::{DatasetSplit, ModelInputs};
use crate::error::{Error, Result};
use crate::model::{Ablation, LatencyNet, ModelConfig, WindowSpec};

pub struct IterativeArm {
    pub phase1: TrainReport,
    /// Absent when the refresh phase is empty; the final metrics then come
    /// straight from the phase-1 model.
    pub refresh: Option<TrainReport>,
    pub final_test: MetricSet,
}

pub struct IterativeOutcome {
    /// Full model: alignment-trained, refresh warm-started from the
    /// temporal embeddings.
    pub warm: IterativeArm,
    /// Alignment-ablated model: refresh starts from zero hidden states.
    pub cold: IterativeArm,
    /// Reference cost: retraining on the whole pre-test history.
    pub full_history: TrainReport,
    /// The test window shared by all three arms.
    pub final_window: Range<usize>,
}

fn run_arm(
    inputs: &ModelInputs,
    edges: &Arc<EdgeIndex>,
    phases: &crate::data::IterativePhases,
    model_cfg: &ModelConfig,
    ablation: Ablation,
    phase1_cfg: &TrainConfig,
    refresh_cfg: &TrainConfig,
) -> Result<IterativeArm> {
    let mut model = LatencyNet::new(model_cfg.clone(), ablation, phase1_cfg.seed)?;
    let phase1_plan = TrainPlan {
        train: WindowSpec::full(phases.original_train.clone())?,
        val: WindowSpec::new(
            phases.original_train.start..phases.deploy.end,
            phases.deploy.clone(),
        )?,
        test: WindowSpec::new(
            phases.original_train.start..phases.final_test.end,
            phases.final_test.clone(),
        )?,
        initial_hidden: None,
    };
    let phase1 = train(&mut model, inputs, edges, &phase1_plan, phase1_cfg)?;

    // A refresh window shorter than two weeks scores no (week, horizon)
    // pair at all, so there is nothing to train on: keep the phase-1 model.
    if phases.refresh.len() < 2 {
        let final_test = phase1.best_metrics().clone();
        return Ok(IterativeArm {
            phase1,
            refresh: None,
            final_test,
        });
    }

    // Warm arms read the refresh window's first-step temporal embedding
    // through the alignment maps; the ablated model cannot, so it restarts
    // from zeros.
    let initial_hidden = if ablation.no_align {
        None
    } else {
        Some(model.init_hidden_from_tie(inputs, phases.refresh.start)?)
    };
    let refresh_plan = TrainPlan {
        train: WindowSpec::full(phases.refresh.clone())?,
        val: WindowSpec::full(phases.refresh.clone())?,
        test: WindowSpec::new(
            phases.refresh.start..phases.final_test.end,
            phases.final_test.clone(),
        )?,
        initial_hidden,
    };
    let refresh = train(&mut model, inputs, edges, &refresh_plan, refresh_cfg)?;
    let final_test = refresh.best_metrics().clone();
    Ok(IterativeArm {
        phase1,
        refresh: Some(refresh),
        final_test,
    })
}

/// Run the two refresh arms and the full-history reference on an iterative
/// split. Phase-1 training and the refresh may use different budgets; both
/// arms share seeds so the comparison isolates the initialization.
pub fn iterative_protocol(
    inputs: &ModelInputs,
    edges: &Arc<EdgeIndex>,
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    phase1_cfg: &TrainConfig,
    refresh_cfg: &TrainConfig,
) -> Result<IterativeOutcome> {
    let phases = split
        .iterative
        .as_ref()
        .ok_or_else(|| Error::BadSplit("iterative protocol needs an iterative split".into()))?;

    let warm = run_arm(
        inputs,
        edges,
        phases,
        model_cfg,
        Ablation::default(),
        phase1_cfg,
        refresh_cfg,
    )?;
    let cold = run_arm(
        inputs,
        edges,
        phases,
        model_cfg,
        Ablation {
            no_align: true,
            ..Ablation::default()
        },
        phase1_cfg,
        refresh_cfg,
    )?;

    // Full-history reference: one model fit on everything before the test
    // window, tested identically. Its validation window overlaps training;
    // it exists to price retraining, not to tune it.
    let mut full_model = LatencyNet::new(model_cfg.clone(), Ablation::default(), phase1_cfg.seed)?;
    let history = phases.original_train.start..phases.deploy.end;
    let full_plan = TrainPlan {
        train: WindowSpec::full(history.clone())?,
        val: WindowSpec::new(history, phases.deploy.clone())?,
        test: WindowSpec::new(
            phases.original_train.start..phases.final_test.end,
            phases.final_test.clone(),
        )?,
        initial_hidden: None,
    };
    let full_history = train(&mut full_model, inputs, edges, &full_plan, phase1_cfg)?;

    Ok(IterativeOutcome {
        warm,
        cold,
        full_history,
        final_window: phases.final_test.clone(),
    })
}
