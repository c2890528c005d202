//! Central finite-difference verification of analytic gradients.
//!
//! The caller supplies a loss closure over a named parameter set plus the
//! analytic gradients from one backward pass; `audit` perturbs every
//! coordinate by ±step and compares. Probes whose ± evaluations land on
//! different sides of a LeakyReLU kink are reported as skipped rather than
//! compared against a derivative that does not exist there.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a loss evaluation must report back: the scalar loss and the kink
/// signature of the pass (see `Tape::kink_signature`).
#[derive(Clone, Copy, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub kink_hash: u64,
    pub on_kink: bool,
}

#[derive(Clone, Debug)]
pub enum Probe {
    Checked {
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },
    /// The ±step evaluations straddle (or sit exactly on) a LeakyReLU kink;
    /// the loss is not differentiable at such points.
    SkippedKink,
    NonFiniteLoss,
}

#[derive(Clone, Debug, Default)]
pub struct AuditReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub non_finite: usize,
    pub worst_rel_err: f64,
    pub worst_coordinate: Option<(String, usize)>,
}

/// Discrepancy normalized by the larger magnitude, floored at 1e-4. The
/// floor encodes what a central difference of half-width 1e-5 can certify
/// on a 64-bit loss of order one: its own roundoff noise is ~1e-11, so
/// demanding agreement beyond an absolute 1e-8 (= floor times the usual
/// 1e-4 threshold) would fail coordinates whose true gradient is simply
/// near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Probe one coordinate with a central difference of half-width `step`.
pub fn probe_coordinate<F>(
    eval: &F,
    params: &mut BTreeMap<String, Tensor>,
    name: &str,
    index: usize,
    analytic: f64,
    step: f64,
) -> Result<Probe>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<LossEval>,
{
    let original = params
        .get(name)
        .ok_or_else(|| Error::Invalid {
            op: "gradcheck",
            msg: format!("unknown parameter {:?}", name),
        })?
        .data()[index];

    params.get_mut(name).unwrap().data_mut()[index] = original + step;
    let plus = eval(params);
    params.get_mut(name).unwrap().data_mut()[index] = original - step;
    let minus = eval(params);
    params.get_mut(name).unwrap().data_mut()[index] = original;

    let (plus, minus) = (plus?, minus?);
    if !plus.loss.is_finite() || !minus.loss.is_finite() {
        return Ok(Probe::NonFiniteLoss);
    }
    if plus.on_kink || minus.on_kink || plus.kink_hash != minus.kink_hash {
        return Ok(Probe::SkippedKink);
    }
    let numeric = (plus.loss - minus.loss) / (2.0 * step);
    Ok(Probe::Checked {
        analytic,
        numeric,
        rel_err: relative_error(analytic, numeric),
    })
}

/// Probe every coordinate of every parameter.
pub fn audit<F>(
    eval: F,
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Vec<f64>>,
    step: f64,
) -> Result<AuditReport>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<LossEval>,
{
    let mut work = params.clone();
    let mut report = AuditReport::default();
    for (name, tensor) in params {
        let grads = analytic.get(name).ok_or_else(|| Error::Invalid {
            op: "gradcheck",
            msg: format!("missing analytic gradient for {:?}", name),
        })?;
        if grads.len() != tensor.len() {
            return Err(Error::Invalid {
                op: "gradcheck",
                msg: format!("gradient length mismatch for {:?}", name),
            });
        }
        for index in 0..tensor.len() {
            match probe_coordinate(&eval, &mut work, name, index, grads[index], step)? {
                Probe::Checked { rel_err, .. } => {
                    report.checked += 1;
                    if rel_err > report.worst_rel_err {
                        report.worst_rel_err = rel_err;
                        report.worst_coordinate = Some((name.clone(), index));
                    }
                }
                Probe::SkippedKink => report.skipped_kinks += 1,
                Probe::NonFiniteLoss => report.non_finite += 1,
            }
        }
    }
    Ok(report)
}
