//! Batched forward pass. Each timestep works on `[N, dim]` matrices; the
//! graph stages run over the shared edge list, the temporal stages over the
//! per-location convolution stacks computed up front.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use lfnet_autodiff::{EdgeIndex, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{latency_decay, Ablation, LatencyNet, ModelConfig};
use crate::data::{Array3, ModelInputs};
use crate::error::{Error, Result};

/// `range` is the stretch of weeks the model runs over; `score` is the
/// sub-stretch whose targets enter the prediction losses. Evaluation on a
/// held-out tail keeps `range` starting at the first training week so the
/// recurrent state carries real history, while `score` clips to the tail.
#[derive(Clone, Debug)]
pub struct WindowSpec {
    pub range: Range<usize>,
    pub score: Range<usize>,
}

impl WindowSpec {
    pub fn new(range: Range<usize>, score: Range<usize>) -> Result<Self> {
        if range.is_empty() {
            return Err(Error::Model(format!("empty window {range:?}")));
        }
        if score.start < range.start || score.end > range.end {
            return Err(Error::Model(format!(
                "score range {score:?} not contained in window {range:?}"
            )));
        }
        Ok(WindowSpec { range, score })
    }

    /// Score everything the window covers.
    pub fn full(range: Range<usize>) -> Result<Self> {
        WindowSpec::new(range.clone(), range)
    }
}

#[derive(Default)]
pub struct ForwardOptions {
    /// Present in training mode: drives the head dropout masks.
    pub dropout_rng: Option<ChaCha8Rng>,
    pub collect_attention: bool,
    /// Warm-start hidden states `(h, h_u)`, each `[N, hidden]`.
    pub initial_hidden: Option<(Tensor, Tensor)>,
}

/// Attention distributions captured for auditing. Every entry of
/// `edge_rows` is one per-edge softmax (graph attention and the spatial
/// latency attention); segments are defined by `edges`. Every entry of
/// `temporal_rows` is one `[N, t+1]` row-softmax from the temporal latency
/// attention.
pub struct AttentionTrace {
    pub edge_rows: Vec<Vec<f64>>,
    pub temporal_rows: Vec<Tensor>,
    pub edges: Arc<EdgeIndex>,
}

pub struct ForwardRun {
    pub tape: Tape,
    pub loss: Var,
    /// Parameter name to tape leaf, for reading gradients after backward.
    pub vars: BTreeMap<String, Var>,
    pub l_r: f64,
    pub l_u: f64,
    pub l_a: f64,
    /// Per window step: (week the prediction was made at, `[N, horizon]`
    /// normalized outputs for weeks `t+1 ..= t+horizon`).
    pub predictions: Vec<(usize, Tensor)>,
    /// Number of (location, week, horizon) pairs in the prediction losses.
    pub scored_pairs: usize,
    pub trace: Option<AttentionTrace>,
}

struct Ctx<'a> {
    tape: Tape,
    vars: BTreeMap<String, Var>,
    cfg: &'a ModelConfig,
    edges: Arc<EdgeIndex>,
    n: usize,
}

impl Ctx<'_> {
    fn new<'m>(model: &'m LatencyNet, edges: &Arc<EdgeIndex>, n: usize) -> Result<Ctx<'m>> {
        let mut ctx = Ctx {
            tape: Tape::new(),
            vars: BTreeMap::new(),
            cfg: &model.config,
            edges: Arc::clone(edges),
            n,
        };
        for (name, tensor) in &model.params {
            let leaf = ctx.tape.leaf(tensor.clone())?;
            ctx.vars.insert(name.clone(), leaf);
        }
        Ok(ctx)
    }

    fn p(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn leaky(&mut self, v: Var) -> Result<Var> {
        Ok(self.tape.leaky_relu(v, self.cfg.leaky_slope)?)
    }

    /// `leaky(x W1 + b1) W2 + b2`
    fn mlp2(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (w1, b1) = (self.p(&format!("{prefix}.w1")), self.p(&format!("{prefix}.b1")));
        let (w2, b2) = (self.p(&format!("{prefix}.w2")), self.p(&format!("{prefix}.b2")));
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_bias(h, b1)?;
        let h = self.leaky(h)?;
        let o = self.tape.matmul(h, w2)?;
        Ok(self.tape.add_bias(o, b2)?)
    }

    fn week_leaf(&mut self, arr: &Array3, week: usize) -> Result<Var> {
        let mut data = Vec::with_capacity(self.n * arr.f);
        for i in 0..self.n {
            data.extend_from_slice(arr.cell(i, week));
        }
        Ok(self.tape.leaf(Tensor::new(vec![self.n, arr.f], data)?)?)
    }

    /// Multi-scale temporal embeddings for one stream over the window:
    /// per-location dilated causal convolutions, feature recalibration from
    /// causal prefix means, then one `[N, C]` matrix per window step.
    fn tie(&mut self, arr: &Array3, branch: &str, range: &Range<usize>) -> Result<Vec<Var>> {
        let t_w = range.len();
        let f = arr.f;
        let mut conv_rows = Vec::with_capacity(self.n);
        let mut mean_rows = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut data = Vec::with_capacity(t_w * f);
            for w in range.clone() {
                data.extend_from_slice(arr.cell(i, w));
            }
            let x_i = self.tape.leaf(Tensor::new(vec![t_w, f], data)?)?;
            let mut convs = Vec::with_capacity(self.cfg.dilations.len());
            for &phi in &self.cfg.dilations {
                let kernel = self.p(&format!("tie.{branch}.conv.d{phi}"));
                convs.push(self.tape.causal_conv1d(x_i, kernel, phi)?);
            }
            conv_rows.push(self.tape.concat(&convs, 1)?);
            mean_rows.push(self.tape.prefix_mean(x_i)?);
        }
        let c_all = self.tape.concat(&conv_rows, 0)?;
        let m_all = self.tape.concat(&mean_rows, 0)?;
        let gate = self.mlp2(m_all, &format!("tie.{branch}.recal"))?;
        let gate = self.tape.sigmoid(gate)?;
        let c_hat = self.tape.mul(c_all, gate)?;
        let mut steps = Vec::with_capacity(t_w);
        for tau in 0..t_w {
            let rows: Vec<usize> = (0..self.n).map(|i| i * t_w + tau).collect();
            steps.push(self.tape.gather_rows(c_hat, &rows)?);
        }
        Ok(steps)
    }

    /// `KL(softmax(map(c)) || softmax(h))` averaged over rows.
    fn alignment_kl(&mut self, prefix: &str, c: Var, h: Var) -> Result<Var> {
        let mapped = self.mlp2(c, prefix)?;
        let lp = self.tape.log_softmax(mapped)?;
        let p = self.tape.exp(lp)?;
        let lq = self.tape.log_softmax(h)?;
        let diff = self.tape.sub(lp, lq)?;
        let terms = self.tape.mul(p, diff)?;
        let total = self.tape.sum_all(terms)?;
        let rows = self.tape.value(c).shape()[0];
        Ok(self.tape.scale(total, 1.0 / rows as f64)?)
    }
}

/// The ten leaves of one GRU recurrence, resolved from a parameter map by
/// prefix. Shared by the main model's twin recurrences and the baseline.
pub(crate) struct GruCell {
    w_xr: Var,
    w_hr: Var,
    b_r: Var,
    w_xz: Var,
    w_hz: Var,
    b_z: Var,
    w_xn: Var,
    w_hn: Var,
    b_n: Var,
    b_hn: Var,
}

impl GruCell {
    pub(crate) fn resolve(vars: &BTreeMap<String, Var>, prefix: &str) -> GruCell {
        let p = |suffix: &str| {
            *vars
                .get(&format!("{prefix}.{suffix}"))
                .unwrap_or_else(|| panic!("unknown parameter {prefix}.{suffix}"))
        };
        GruCell {
            w_xr: p("w_xr"),
            w_hr: p("w_hr"),
            b_r: p("b_r"),
            w_xz: p("w_xz"),
            w_hz: p("w_hz"),
            b_z: p("b_z"),
            w_xn: p("w_xn"),
            w_hn: p("w_hn"),
            b_n: p("b_n"),
            b_hn: p("b_hn"),
        }
    }

    /// `h' = (1 - z) n + z h` with reset-gated candidate
    /// `n = tanh(x W_xn + b_n + r (h W_hn + b_hn))`.
    pub(crate) fn step(
        &self,
        tape: &mut Tape,
        x: Var,
        h: Var,
    ) -> lfnet_autodiff::Result<Var> {
        let mut gate = |w_x: Var, w_h: Var, b: Var| -> lfnet_autodiff::Result<Var> {
            let xs = tape.matmul(x, w_x)?;
            let hs = tape.matmul(h, w_h)?;
            let sum = tape.add(xs, hs)?;
            let sum = tape.add_bias(sum, b)?;
            tape.sigmoid(sum)
        };
        let r = gate(self.w_xr, self.w_hr, self.b_r)?;
        let z = gate(self.w_xz, self.w_hz, self.b_z)?;
        let xn = tape.matmul(x, self.w_xn)?;
        let xn = tape.add_bias(xn, self.b_n)?;
        let hn = tape.matmul(h, self.w_hn)?;
        let hn = tape.add_bias(hn, self.b_hn)?;
        let gated = tape.mul(r, hn)?;
        let n = tape.add(xn, gated)?;
        let n = tape.tanh(n)?;
        let keep = tape.sub(h, n)?;
        let keep = tape.mul(z, keep)?;
        tape.add(n, keep)
    }
}

pub(crate) fn wrap_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Autodiff(lfnet_autodiff::Error::NonFinite { op }) => {
            Error::NonFiniteStep { step, stage: op }
        }
        other => other,
    }
}

/// Report the earliest week carrying a non-finite input value.
pub(crate) fn scan_finite(inputs: &ModelInputs, range: &Range<usize>) -> Result<()> {
    let n = inputs.x.n;
    for w in range.clone() {
        for i in 0..n {
            let clean = inputs.x.cell(i, w).iter().all(|v| v.is_finite())
                && inputs.u.cell(i, w).iter().all(|v| v.is_finite())
                && inputs.delta_t.at(i, w).is_finite()
                && inputs.y.at(i, w).is_finite()
                && inputs.y_u.at(i, w).is_finite();
            if !clean {
                return Err(Error::NonFiniteStep { step: w, stage: "input" });
            }
        }
    }
    Ok(())
}

/// Loop state for one forward run.
struct Walker<'a> {
    ctx: Ctx<'a>,
    abl: Ablation,
    inputs: &'a ModelInputs,
    spec: &'a WindowSpec,
    trace: Option<AttentionTrace>,
    drop_rng: Option<ChaCha8Rng>,
    v_s: Var,
    tie_x: Vec<Var>,
    tie_u: Vec<Var>,
    h: Var,
    h_u: Var,
    /// Revised-stream hidden history, the temporal attention values.
    h_hist: Vec<Var>,
    /// Cached key-side temporal scores, one `[N]` vector per past step.
    betas: Vec<Var>,
    /// Main hidden states kept for the alignment loss.
    h_main: Vec<Var>,
    predictions: Vec<(usize, Tensor)>,
    sq_main: Option<Var>,
    sq_aux: Option<Var>,
    scored_pairs: usize,
}

impl<'a> Walker<'a> {
    fn step(&mut self, tau: usize, week: usize) -> Result<()> {
        let ctx = &mut self.ctx;
        let x_t = ctx.week_leaf(&self.inputs.x, week)?;
        let u_t = ctx.week_leaf(&self.inputs.u, week)?;

        let g = self.gat(x_t, "x")?;
        let g_u = self.gat(u_t, "u")?;

        let g_hat_u = if self.abl.no_slatt {
            g_u
        } else {
            self.slatt(week, g, g_u)?
        };
        let g_hat = self.ctx.tape.concat(&[g, g_hat_u, x_t], 1)?;

        self.h = self.gru_step("x", g_hat, self.h)?;
        self.h_u = self.gru_step("u", g_u, self.h_u)?;
        self.h_hist.push(self.h_u);
        if !self.abl.no_align {
            self.h_main.push(self.h);
        }

        let c_t = self.tie_x[tau];
        let c_u_t = self.tie_u[tau];
        let h_hat_u = if self.abl.no_tlatt {
            self.h_u
        } else {
            let proj = self.ctx.tape.matmul(self.h_u, self.ctx.p("tlatt.w_h2_h"))?;
            let beta = self.ctx.tape.matmul(proj, self.ctx.p("tlatt.w_a"))?;
            self.betas.push(beta);
            self.tlatt(c_t, c_u_t, tau)?
        };
        let h_hat = self.ctx.tape.concat(&[self.h, h_hat_u, c_t], 1)?;

        let y_hat = self.head("head.main", h_hat)?;
        let y_hat_u = self.head("head.aux", self.h_u)?;
        self.predictions
            .push((week, self.ctx.tape.value(y_hat).clone()));
        self.score(week, y_hat, y_hat_u)
    }

    /// Multi-head graph attention over one input stream: per-head scores
    /// `leaky(a_dst . z_i + a_src . z_j)`, neighborhood softmax, value
    /// aggregation with `w_g`, head-mean, output nonlinearity.
    fn gat(&mut self, inp: Var, branch: &str) -> Result<Var> {
        let ctx = &mut self.ctx;
        let edges = Arc::clone(&ctx.edges);
        let mut acc: Option<Var> = None;
        for head in 0..ctx.cfg.heads {
            let pre = format!("gat.{branch}.h{head}");
            let z = ctx.tape.matmul(inp, ctx.p(&format!("{pre}.w_z")))?;
            let s = ctx.tape.matmul(z, ctx.p(&format!("{pre}.a_dst")))?;
            let r = ctx.tape.matmul(z, ctx.p(&format!("{pre}.a_src")))?;
            let e = ctx.tape.edge_pair_sum(s, r, &edges)?;
            let e = ctx.leaky(e)?;
            let attn = ctx.tape.segment_softmax(e, &edges)?;
            if let Some(tr) = self.trace.as_mut() {
                tr.edge_rows.push(ctx.tape.value(attn).data().to_vec());
            }
            let vals = ctx.tape.matmul(inp, ctx.p(&format!("{pre}.w_g")))?;
            let agg = ctx.tape.segment_weighted_sum(attn, vals, &edges)?;
            acc = Some(match acc {
                None => agg,
                Some(a) => ctx.tape.add(a, agg)?,
            });
        }
        let mean = ctx.tape.scale(acc.unwrap(), 1.0 / ctx.cfg.heads as f64)?;
        ctx.leaky(mean)
    }

    /// Latency-weighted spatial attention: fuses revised-stream embeddings
    /// into the real-time stream across graph neighborhoods. Scores are
    /// sigmoid-squashed so the latency decay always damps, then softmaxed
    /// per neighborhood.
    fn slatt(&mut self, week: usize, g: Var, g_u: Var) -> Result<Var> {
        let ctx = &mut self.ctx;
        let edges = Arc::clone(&ctx.edges);
        let q_in = ctx.tape.concat(&[g, self.v_s], 1)?;
        let q = ctx.tape.matmul(q_in, ctx.p("slatt.w_q"))?;
        let s = ctx.tape.matmul(q, ctx.p("slatt.w_a"))?;
        let k_in = ctx.tape.concat(&[g_u, self.v_s], 1)?;
        let k = ctx.tape.matmul(k_in, ctx.p("slatt.w_k"))?;
        let r = ctx.tape.matmul(k, ctx.p("slatt.w_a"))?;
        let e = ctx.tape.edge_pair_sum(s, r, &edges)?;
        let e = ctx.tape.sigmoid(e)?;
        let decay: Vec<f64> = (0..edges.num_edges())
            .map(|idx| latency_decay(self.inputs.delta_t.at(edges.src[idx], week)))
            .collect();
        let e = ctx.tape.mul_const(e, Tensor::vector(decay))?;
        let attn = ctx.tape.segment_softmax(e, &edges)?;
        if let Some(tr) = self.trace.as_mut() {
            tr.edge_rows.push(ctx.tape.value(attn).data().to_vec());
        }
        let agg = ctx.tape.segment_weighted_sum(attn, g_u, &edges)?;
        ctx.leaky(agg)
    }

    fn gru_step(&mut self, branch: &str, x: Var, h: Var) -> Result<Var> {
        let ctx = &mut self.ctx;
        let cell = GruCell::resolve(&ctx.vars, &format!("gru.{branch}"));
        Ok(cell.step(&mut ctx.tape, x, h)?)
    }

    /// Latency-weighted temporal attention of the current step over the
    /// whole revised-stream hidden history. Scores decompose into a query
    /// part (current step) plus the cached key parts.
    fn tlatt(&mut self, c_t: Var, c_u_t: Var, tau: usize) -> Result<Var> {
        let ctx = &mut self.ctx;
        let q_in = ctx.tape.concat(&[self.h, c_t], 1)?;
        let q = ctx.tape.matmul(q_in, ctx.p("tlatt.w_h1"))?;
        let qc = ctx.tape.matmul(c_u_t, ctx.p("tlatt.w_h2_c"))?;
        let q = ctx.tape.add(q, qc)?;
        let alpha = ctx.tape.matmul(q, ctx.p("tlatt.w_a"))?;
        let mut cols = Vec::with_capacity(tau + 1);
        for beta in &self.betas {
            cols.push(ctx.tape.add(alpha, *beta)?);
        }
        let scores = ctx.tape.stack_cols(&cols)?;
        let scores = ctx.tape.sigmoid(scores)?;
        let decay_row: Vec<f64> = (0..=tau).map(|i| latency_decay((tau - i) as f64)).collect();
        let mut decay = Vec::with_capacity(ctx.n * (tau + 1));
        for _ in 0..ctx.n {
            decay.extend_from_slice(&decay_row);
        }
        let scores = ctx
            .tape
            .mul_const(scores, Tensor::new(vec![ctx.n, tau + 1], decay)?)?;
        let attn = ctx.tape.softmax(scores)?;
        if let Some(tr) = self.trace.as_mut() {
            tr.temporal_rows.push(ctx.tape.value(attn).clone());
        }
        Ok(ctx.tape.weighted_sum_rows(&self.h_hist, attn)?)
    }

    /// Prediction head: `leaky(x W1 + b1)`, dropout in training mode,
    /// linear output `[N, horizon]`.
    fn head(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let ctx = &mut self.ctx;
        let h = ctx.tape.matmul(x, ctx.p(&format!("{prefix}.w1")))?;
        let h = ctx.tape.add_bias(h, ctx.p(&format!("{prefix}.b1")))?;
        let mut h = ctx.leaky(h)?;
        if let Some(rng) = self.drop_rng.as_mut() {
            let p = ctx.cfg.dropout;
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let len = ctx.tape.value(h).len();
                let shape = ctx.tape.value(h).shape().to_vec();
                let mask: Vec<f64> = (0..len)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                h = ctx.tape.dropout(h, Tensor::new(shape, mask)?)?;
            }
        }
        let o = ctx.tape.matmul(h, ctx.p(&format!("{prefix}.w2")))?;
        Ok(ctx.tape.add_bias(o, ctx.p(&format!("{prefix}.b2")))?)
    }

    /// Squared errors for every horizon whose target week is scored.
    fn score(&mut self, week: usize, y_hat: Var, y_hat_u: Var) -> Result<()> {
        let (n, k) = (self.ctx.n, self.ctx.cfg.horizon);
        let mut tgt = vec![0.0; n * k];
        let mut tgt_u = vec![0.0; n * k];
        let mut mask = vec![0.0; n * k];
        let mut step_pairs = 0usize;
        for hz in 1..=k {
            let target_week = week + hz;
            if target_week >= self.spec.score.start && target_week < self.spec.score.end {
                for i in 0..n {
                    tgt[i * k + hz - 1] = self.inputs.y.at(i, target_week);
                    tgt_u[i * k + hz - 1] = self.inputs.y_u.at(i, target_week);
                    mask[i * k + hz - 1] = 1.0;
                }
                step_pairs += n;
            }
        }
        if step_pairs == 0 {
            return Ok(());
        }
        self.scored_pairs += step_pairs;
        for (pred, data, acc) in [
            (y_hat, &tgt, &mut self.sq_main),
            (y_hat_u, &tgt_u, &mut self.sq_aux),
        ] {
            let tape = &mut self.ctx.tape;
            let leaf = tape.leaf(Tensor::new(vec![n, k], data.clone())?)?;
            let diff = tape.sub(pred, leaf)?;
            let diff = tape.mul_const(diff, Tensor::new(vec![n, k], mask.clone())?)?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum_all(sq)?;
            *acc = Some(match acc.take() {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
        Ok(())
    }
}

impl LatencyNet {
    pub fn forward(
        &self,
        inputs: &ModelInputs,
        edges: &Arc<EdgeIndex>,
        spec: &WindowSpec,
        opts: ForwardOptions,
    ) -> Result<ForwardRun> {
        let cfg = &self.config;
        let n = inputs.x.n;
        if edges.num_nodes() != n {
            return Err(Error::Model(format!(
                "graph has {} nodes but data has {n} locations",
                edges.num_nodes()
            )));
        }
        if inputs.x.f != cfg.f {
            return Err(Error::Model(format!(
                "model expects {} features, data has {}",
                cfg.f, inputs.x.f
            )));
        }
        if spec.range.end > inputs.x.t {
            return Err(Error::Model(format!(
                "window {:?} exceeds {} weeks of data",
                spec.range, inputs.x.t
            )));
        }
        scan_finite(inputs, &spec.range)?;

        let mut ctx = Ctx::new(self, edges, n)?;
        let start = spec.range.start;

        // Static-feature embedding, shared by every step.
        let statics = ctx.tape.leaf(Tensor::new(
            vec![n, cfg.static_dim()],
            inputs.statics.clone(),
        )?)?;
        let v_s = ctx.mlp2(statics, "sie")?;

        let tie_x = ctx.tie(&inputs.x, "x", &spec.range).map_err(wrap_step(start))?;
        let tie_u = ctx.tie(&inputs.u, "u", &spec.range).map_err(wrap_step(start))?;

        let (h0, h0_u) = match opts.initial_hidden {
            Some((hx, hu)) => {
                for t in [&hx, &hu] {
                    if t.shape() != [n, cfg.hidden] {
                        return Err(Error::Model(format!(
                            "initial hidden state must be [{n}, {}]",
                            cfg.hidden
                        )));
                    }
                }
                (ctx.tape.leaf(hx)?, ctx.tape.leaf(hu)?)
            }
            None => (
                ctx.tape.leaf(Tensor::zeros(vec![n, cfg.hidden]))?,
                ctx.tape.leaf(Tensor::zeros(vec![n, cfg.hidden]))?,
            ),
        };

        let mut walker = Walker {
            ctx,
            abl: self.ablation,
            inputs,
            spec,
            trace: opts.collect_attention.then(|| AttentionTrace {
                edge_rows: Vec::new(),
                temporal_rows: Vec::new(),
                edges: Arc::clone(edges),
            }),
            drop_rng: opts.dropout_rng,
            v_s,
            tie_x,
            tie_u,
            h: h0,
            h_u: h0_u,
            h_hist: Vec::new(),
            betas: Vec::new(),
            h_main: Vec::new(),
            predictions: Vec::new(),
            sq_main: None,
            sq_aux: None,
            scored_pairs: 0,
        };

        for (tau, week) in spec.range.clone().enumerate() {
            walker.step(tau, week).map_err(wrap_step(week))?;
        }

        let Walker {
            mut ctx,
            trace,
            h_main,
            h_hist,
            tie_x,
            tie_u,
            predictions,
            sq_main,
            sq_aux,
            scored_pairs,
            ..
        } = walker;

        let mut parts: Vec<Var> = Vec::new();
        let (mut l_r, mut l_u, mut l_a) = (0.0, 0.0, 0.0);
        if scored_pairs > 0 {
            let lr = ctx.tape.scale(sq_main.unwrap(), 1.0 / scored_pairs as f64)?;
            let lu = ctx.tape.scale(sq_aux.unwrap(), 1.0 / scored_pairs as f64)?;
            l_r = ctx.tape.value(lr).data()[0];
            l_u = ctx.tape.value(lu).data()[0];
            parts.push(lr);
            parts.push(lu);
        }
        if !self.ablation.no_align {
            let kl = (|| -> Result<Var> {
                let h_stack = ctx.tape.concat(&h_main, 0)?;
                let c_stack = ctx.tape.concat(&tie_x, 0)?;
                let kl_x = ctx.alignment_kl("align.x", c_stack, h_stack)?;
                let hu_stack = ctx.tape.concat(&h_hist, 0)?;
                let cu_stack = ctx.tape.concat(&tie_u, 0)?;
                let kl_u = ctx.alignment_kl("align.u", cu_stack, hu_stack)?;
                Ok(ctx.tape.add(kl_x, kl_u)?)
            })()
            .map_err(wrap_step(start))?;
            l_a = ctx.tape.value(kl).data()[0];
            parts.push(kl);
        }
        let mut loss = match parts.first() {
            Some(&v) => v,
            None => ctx.tape.leaf(Tensor::scalar(0.0))?,
        };
        for &p in parts.iter().skip(1) {
            loss = ctx.tape.add(loss, p)?;
        }

        Ok(ForwardRun {
            tape: ctx.tape,
            loss,
            vars: ctx.vars,
            l_r,
            l_u,
            l_a,
            predictions,
            scored_pairs,
            trace,
        })
    }

    /// Warm-start hidden states from the temporal embeddings of the first
    /// window step, mapped through the alignment heads. Models trained with
    /// the alignment loss disabled cannot do this.
    pub fn init_hidden_from_tie(
        &self,
        inputs: &ModelInputs,
        start: usize,
    ) -> Result<(Tensor, Tensor)> {
        if self.ablation.no_align {
            return Err(Error::MissingAlignmentMaps);
        }
        if start >= inputs.x.t {
            return Err(Error::Model(format!(
                "warm-start week {start} out of range for {} weeks",
                inputs.x.t
            )));
        }
        let n = inputs.x.n;
        // Edge structure is irrelevant here; self-loops keep it valid.
        let loops = Arc::new(EdgeIndex::from_neighbor_lists(
            &(0..n).map(|i| vec![i]).collect::<Vec<_>>(),
        ));
        let mut ctx = Ctx::new(self, &loops, n)?;
        // Causality makes the first-step embedding of a window equal to the
        // embedding of the single-step window.
        let range = start..start + 1;
        let mut out = Vec::with_capacity(2);
        for (arr, branch, prefix) in [(&inputs.x, "x", "align.x"), (&inputs.u, "u", "align.u")] {
            let c0 = ctx.tie(arr, branch, &range).map_err(wrap_step(start))?[0];
            let h0 = ctx.mlp2(c0, prefix).map_err(wrap_step(start))?;
            out.push(ctx.tape.value(h0).clone());
        }
        let h_u0 = out.pop().unwrap();
        let h0 = out.pop().unwrap();
        Ok((h0, h_u0))
    }
}
