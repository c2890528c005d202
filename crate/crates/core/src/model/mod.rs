//! LatencyNet: dual graph attention over real-time and revised streams,
//! latency-aware spatial and temporal fusion, twin GRUs, multi-scale
//! temporal embeddings, and an alignment head for warm-starting on new data.

mod baseline;
mod forward;

pub use baseline::{BaselineGru, GruConfig};
pub use forward::{AttentionTrace, ForwardOptions, ForwardRun, WindowSpec};

use crate::data::STATIC_FIELDS;
use crate::error::{Error, Result};
use lfnet_autodiff::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct ModelConfig {
    /// Input feature count, fixed by the dataset.
    pub f: usize,
    pub gat_dim: usize,
    pub heads: usize,
    pub sie_dim: usize,
    pub sie_hidden: usize,
    /// Common projection width for both latency-attention score paths.
    pub attn_dim: usize,
    pub hidden: usize,
    pub filters: usize,
    pub kernel_len: usize,
    pub dilations: Vec<usize>,
    pub recal_hidden: usize,
    pub align_hidden: usize,
    pub head_width: usize,
    pub horizon: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            f: 22,
            gat_dim: 32,
            heads: 2,
            sie_dim: 32,
            sie_hidden: 32,
            attn_dim: 32,
            hidden: 256,
            filters: 16,
            kernel_len: 3,
            dilations: vec![1, 3, 5],
            recal_hidden: 48,
            align_hidden: 128,
            head_width: 128,
            horizon: 1,
            dropout: 0.5,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    /// Total temporal-embedding width: filters per dilation, concatenated.
    pub fn tie_dim(&self) -> usize {
        self.filters * self.dilations.len()
    }

    pub fn static_dim(&self) -> usize {
        STATIC_FIELDS.len()
    }

    fn validate(&self) -> Result<()> {
        if self.f == 0
            || self.gat_dim == 0
            || self.heads == 0
            || self.sie_dim == 0
            || self.attn_dim == 0
            || self.hidden == 0
            || self.filters == 0
            || self.kernel_len == 0
            || self.dilations.is_empty()
            || self.head_width == 0
            || self.horizon == 0
        {
            return Err(Error::Model("every model dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Model(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Component switches mirroring the reduced variants: `no_slatt` passes the
/// updated node embedding through unfused, `no_tlatt` does the same for the
/// updated temporal embedding, `no_align` drops the alignment loss (and with
/// it, warm-start initialization). Parameter shapes do not change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
pub struct Ablation {
    pub no_slatt: bool,
    pub no_tlatt: bool,
    pub no_align: bool,
}

/// `1 / ln(1 + e^dt)`: positive, strictly decreasing, `f(0) = 1/ln 2`.
/// Large inputs go through `ln(1+e^x) = x + ln(1+e^-x)` to dodge overflow.
pub fn latency_decay(dt: f64) -> f64 {
    debug_assert!(dt >= 0.0);
    let softplus = if dt > 30.0 {
        dt + (-dt).exp().ln_1p()
    } else {
        dt.exp().ln_1p()
    };
    1.0 / softplus
}

pub struct LatencyNet {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub params: BTreeMap<String, Tensor>,
}

fn fnv(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub(crate) struct Registry {
    pub(crate) seed: u64,
    pub(crate) params: BTreeMap<String, Tensor>,
}

impl Registry {
    pub(crate) fn init(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv(name));
        self.params
            .insert(name.to_string(), xavier(shape, fan_in, fan_out, &mut rng));
    }

    pub(crate) fn mat(&mut self, name: &str, rows: usize, cols: usize) {
        self.init(name, &[rows, cols], rows, cols);
    }

    pub(crate) fn vec(&mut self, name: &str, len: usize) {
        self.init(name, &[len], len, 1);
    }

    pub(crate) fn zeros(&mut self, name: &str, len: usize) {
        self.params.insert(name.to_string(), Tensor::zeros(vec![len]));
    }
}

impl LatencyNet {
    pub fn new(config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        // Every parameter draws from its own stream keyed by (seed, name),
        // so the registry is insensitive to construction order.
        let mut reg = Registry {
            seed,
            params: BTreeMap::new(),
        };
        let (f, g, s, a, h) = (
            config.f,
            config.gat_dim,
            config.sie_dim,
            config.attn_dim,
            config.hidden,
        );
        let c = config.tie_dim();
        let k = config.horizon;

        for branch in ["x", "u"] {
            for head in 0..config.heads {
                reg.mat(&format!("gat.{branch}.h{head}.w_z"), f, g);
                reg.mat(&format!("gat.{branch}.h{head}.w_g"), f, g);
                reg.vec(&format!("gat.{branch}.h{head}.a_dst"), g);
                reg.vec(&format!("gat.{branch}.h{head}.a_src"), g);
            }
        }
        reg.mat("sie.w1", config.static_dim(), config.sie_hidden);
        reg.zeros("sie.b1", config.sie_hidden);
        reg.mat("sie.w2", config.sie_hidden, s);
        reg.zeros("sie.b2", s);
        reg.mat("slatt.w_q", g + s, a);
        reg.mat("slatt.w_k", g + s, a);
        reg.vec("slatt.w_a", a);
        let main_in = 2 * g + f;
        for (branch, input) in [("x", main_in), ("u", g)] {
            for gate in ["r", "z", "n"] {
                reg.mat(&format!("gru.{branch}.w_x{gate}"), input, h);
                reg.mat(&format!("gru.{branch}.w_h{gate}"), h, h);
                reg.zeros(&format!("gru.{branch}.b_{gate}"), h);
            }
            reg.zeros(&format!("gru.{branch}.b_hn"), h);
        }
        for branch in ["x", "u"] {
            for &phi in &config.dilations {
                reg.init(
                    &format!("tie.{branch}.conv.d{phi}"),
                    &[config.kernel_len, f, config.filters],
                    config.kernel_len * f,
                    config.filters,
                );
            }
            reg.mat(&format!("tie.{branch}.recal.w1"), f, config.recal_hidden);
            reg.zeros(&format!("tie.{branch}.recal.b1"), config.recal_hidden);
            reg.mat(&format!("tie.{branch}.recal.w2"), config.recal_hidden, c);
            reg.zeros(&format!("tie.{branch}.recal.b2"), c);
            reg.mat(&format!("align.{branch}.w1"), c, config.align_hidden);
            reg.zeros(&format!("align.{branch}.b1"), config.align_hidden);
            reg.mat(&format!("align.{branch}.w2"), config.align_hidden, h);
            reg.zeros(&format!("align.{branch}.b2"), h);
        }
        reg.mat("tlatt.w_h1", h + c, a);
        reg.mat("tlatt.w_h2_h", h, a);
        reg.mat("tlatt.w_h2_c", c, a);
        reg.vec("tlatt.w_a", a);
        reg.mat("head.main.w1", 2 * h + c, config.head_width);
        reg.zeros("head.main.b1", config.head_width);
        reg.mat("head.main.w2", config.head_width, k);
        reg.zeros("head.main.b2", k);
        reg.mat("head.aux.w1", h, config.head_width);
        reg.zeros("head.aux.b1", config.head_width);
        reg.mat("head.aux.w2", config.head_width, k);
        reg.zeros("head.aux.b2", k);

        let model = LatencyNet {
            config,
            ablation,
            params: reg.params,
        };
        log::info!("model built: {} parameters", model.param_count());
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}
