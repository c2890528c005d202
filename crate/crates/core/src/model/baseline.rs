//! Plain GRU baseline: locations are independent samples, the revised
//! stream is concatenated to the real-time stream at every step, and a
//! two-layer head reads the horizon out of the hidden state.

use std::collections::BTreeMap;
use std::ops::Range;

use lfnet_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::forward::{scan_finite, wrap_step, GruCell};
use super::{ForwardOptions, ForwardRun, Registry, WindowSpec};
use crate::data::ModelInputs;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, serde::Deserialize, serde::Serialize)]
pub struct GruConfig {
    pub f: usize,
    pub hidden: usize,
    pub head_width: usize,
    pub horizon: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for GruConfig {
    fn default() -> Self {
        GruConfig {
            f: 22,
            hidden: 128,
            head_width: 128,
            horizon: 1,
            dropout: 0.5,
            leaky_slope: 0.2,
        }
    }
}

pub struct BaselineGru {
    pub config: GruConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl BaselineGru {
    pub fn new(config: GruConfig, seed: u64) -> Result<Self> {
        if config.f == 0
            || config.hidden == 0
            || config.head_width == 0
            || config.horizon == 0
            || !(0.0..1.0).contains(&config.dropout)
        {
            return Err(Error::Model("bad baseline configuration".into()));
        }
        let mut reg = Registry {
            seed,
            params: BTreeMap::new(),
        };
        let (input, h) = (2 * config.f, config.hidden);
        for gate in ["r", "z", "n"] {
            reg.mat(&format!("gru.w_x{gate}"), input, h);
            reg.mat(&format!("gru.w_h{gate}"), h, h);
            reg.zeros(&format!("gru.b_{gate}"), h);
        }
        reg.zeros("gru.b_hn", h);
        reg.mat("head.w1", h, config.head_width);
        reg.zeros("head.b1", config.head_width);
        reg.mat("head.w2", config.head_width, config.horizon);
        reg.zeros("head.b2", config.horizon);
        Ok(BaselineGru {
            config,
            params: reg.params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn forward(
        &self,
        inputs: &ModelInputs,
        spec: &WindowSpec,
        opts: ForwardOptions,
    ) -> Result<ForwardRun> {
        let cfg = &self.config;
        let n = inputs.x.n;
        if inputs.x.f != cfg.f {
            return Err(Error::Model(format!(
                "baseline expects {} features, data has {}",
                cfg.f, inputs.x.f
            )));
        }
        if spec.range.end > inputs.x.t {
            return Err(Error::Model(format!(
                "window {:?} exceeds {} weeks of data",
                spec.range, inputs.x.t
            )));
        }
        if opts.initial_hidden.is_some() {
            return Err(Error::Model(
                "the baseline has no warm-start initialization".into(),
            ));
        }
        scan_finite(inputs, &spec.range)?;

        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.params {
            vars.insert(name.clone(), tape.leaf(tensor.clone())?);
        }
        let cell = GruCell::resolve(&vars, "gru");
        let mut h = tape.leaf(Tensor::zeros(vec![n, cfg.hidden]))?;
        let mut drop_rng = opts.dropout_rng;

        let mut predictions = Vec::new();
        let mut sq: Option<Var> = None;
        let mut scored_pairs = 0usize;
        for week in spec.range.clone() {
            (h, scored_pairs) = (|| -> Result<(Var, usize)> {
                let mut data = Vec::with_capacity(n * 2 * cfg.f);
                for i in 0..n {
                    data.extend_from_slice(inputs.x.cell(i, week));
                    data.extend_from_slice(inputs.u.cell(i, week));
                }
                let x_t = tape.leaf(Tensor::new(vec![n, 2 * cfg.f], data)?)?;
                let h = cell.step(&mut tape, x_t, h)?;

                let o = tape.matmul(h, vars["head.w1"])?;
                let o = tape.add_bias(o, vars["head.b1"])?;
                let mut o = tape.leaky_relu(o, cfg.leaky_slope)?;
                if let Some(rng) = drop_rng.as_mut() {
                    if cfg.dropout > 0.0 {
                        let keep = 1.0 / (1.0 - cfg.dropout);
                        let mask: Vec<f64> = (0..n * cfg.head_width)
                            .map(|_| if rng.gen::<f64>() < cfg.dropout { 0.0 } else { keep })
                            .collect();
                        o = tape.dropout(o, Tensor::new(vec![n, cfg.head_width], mask)?)?;
                    }
                }
                let o = tape.matmul(o, vars["head.w2"])?;
                let y_hat = tape.add_bias(o, vars["head.b2"])?;
                predictions.push((week, tape.value(y_hat).clone()));

                let pairs = score_week(
                    &mut tape,
                    inputs,
                    &spec.score,
                    week,
                    cfg.horizon,
                    y_hat,
                    &mut sq,
                )?;
                Ok((h, scored_pairs + pairs))
            })()
            .map_err(wrap_step(week))?;
        }

        let (loss, l_r) = match sq {
            Some(total) => {
                let l = tape.scale(total, 1.0 / scored_pairs as f64)?;
                let v = tape.value(l).data()[0];
                (l, v)
            }
            None => (tape.leaf(Tensor::scalar(0.0))?, 0.0),
        };

        Ok(ForwardRun {
            tape,
            loss,
            vars,
            l_r,
            l_u: 0.0,
            l_a: 0.0,
            predictions,
            scored_pairs,
            trace: None,
        })
    }
}

/// Masked squared error against the main target for every horizon whose
/// week lands in the scored range; mirrors the main model's bookkeeping.
fn score_week(
    tape: &mut Tape,
    inputs: &ModelInputs,
    score: &Range<usize>,
    week: usize,
    horizon: usize,
    y_hat: Var,
    sq: &mut Option<Var>,
) -> Result<usize> {
    let n = inputs.x.n;
    let mut tgt = vec![0.0; n * horizon];
    let mut mask = vec![0.0; n * horizon];
    let mut pairs = 0usize;
    for hz in 1..=horizon {
        let target_week = week + hz;
        if target_week >= score.start && target_week < score.end {
            for i in 0..n {
                tgt[i * horizon + hz - 1] = inputs.y.at(i, target_week);
                mask[i * horizon + hz - 1] = 1.0;
            }
            pairs += n;
        }
    }
    if pairs == 0 {
        return Ok(0);
    }
    let leaf = tape.leaf(Tensor::new(vec![n, horizon], tgt)?)?;
    let diff = tape.sub(y_hat, leaf)?;
    let diff = tape.mul_const(diff, Tensor::new(vec![n, horizon], mask)?)?;
    let s = tape.mul(diff, diff)?;
    let s = tape.sum_all(s)?;
    *sq = Some(match sq.take() {
        None => s,
        Some(a) => tape.add(a, s)?,
    });
    Ok(pairs)
}
