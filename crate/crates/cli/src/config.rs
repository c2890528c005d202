//! Flat `key = value` run configuration. Every key has a typed default;
//! the fully resolved config is echoed into each command's report.json.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lfnet::data::synth::SynthConfig;
use lfnet::data::SplitMode;
use lfnet::geo::GraphConfig;
use lfnet::model::{Ablation, GruConfig, ModelConfig};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Standard,
    Iterative,
    Multistep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Latencynet,
    Gru,
}

pub const ABLATIONS: [&str; 4] = ["no-slatt", "no-tlatt", "no-latt", "no-align"];

pub const VALID_KEYS: [&str; 41] = [
    "data_dir",
    "target_feature",
    "impute_income",
    "synth_n",
    "synth_t",
    "synth_f",
    "latency_interval",
    "noise_sigma",
    "neighbor_min",
    "neighbor_max",
    "resample_max",
    "alpha",
    "beta",
    "gamma",
    "omega",
    "model",
    "gat_dim",
    "heads",
    "sie_dim",
    "sie_hidden",
    "attn_dim",
    "hidden",
    "filters",
    "kernel_len",
    "dilations",
    "recal_hidden",
    "align_hidden",
    "head_width",
    "horizon",
    "dropout",
    "leaky_slope",
    "gru_hidden",
    "lr",
    "epochs",
    "refresh_epochs",
    "seed",
    "batch",
    "mode",
    "ablate",
    "checkpoint",
    "device_threads",
];

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub target_feature: usize,
    pub impute_income: bool,

    pub synth_n: usize,
    pub synth_t: usize,
    pub synth_f: usize,
    pub latency_interval: usize,
    pub noise_sigma: f64,
    pub neighbor_min: usize,
    pub neighbor_max: usize,
    pub resample_max: usize,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub omega: f64,

    pub model: ModelKind,
    pub gat_dim: usize,
    pub heads: usize,
    pub sie_dim: usize,
    pub sie_hidden: usize,
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
    pub gru_hidden: usize,

    pub lr: f64,
    pub epochs: usize,
    pub refresh_epochs: usize,
    pub seed: u64,
    /// Training granularity; only whole-window ("full") training exists.
    pub batch: String,

    pub mode: Mode,
    pub ablate: BTreeSet<String>,
    pub checkpoint: Option<PathBuf>,
    pub device_threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let gru = GruConfig::default();
        let synth = SynthConfig::default();
        let graph = GraphConfig::default();
        RunConfig {
            data_dir: None,
            target_feature: 0,
            impute_income: false,
            synth_n: synth.n,
            synth_t: synth.t,
            synth_f: synth.f,
            latency_interval: synth.latency_interval,
            noise_sigma: synth.noise_sigma,
            neighbor_min: synth.neighbor_min,
            neighbor_max: synth.neighbor_max,
            resample_max: synth.resample_max,
            alpha: graph.alpha,
            beta: graph.beta,
            gamma: graph.gamma,
            omega: graph.omega,
            model: ModelKind::Latencynet,
            gat_dim: model.gat_dim,
            heads: model.heads,
            sie_dim: model.sie_dim,
            sie_hidden: model.sie_hidden,
            attn_dim: model.attn_dim,
            hidden: model.hidden,
            filters: model.filters,
            kernel_len: model.kernel_len,
            dilations: model.dilations,
            recal_hidden: model.recal_hidden,
            align_hidden: model.align_hidden,
            head_width: model.head_width,
            horizon: model.horizon,
            dropout: model.dropout,
            leaky_slope: model.leaky_slope,
            gru_hidden: gru.hidden,
            lr: 0.001,
            epochs: 200,
            refresh_epochs: 50,
            seed: 42,
            batch: "full".into(),
            mode: Mode::Standard,
            ablate: BTreeSet::new(),
            checkpoint: None,
            device_threads: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("config key `{key}` expects {kind}, got `{value}`"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let list: Vec<usize> = value
        .split(',')
        .map(|p| parse(key, p.trim(), "a comma list of integers"))
        .collect::<Result<_>>()?;
    if list.is_empty() {
        bail!("config key `{key}` needs at least one entry");
    }
    Ok(list)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "target_feature" => self.target_feature = parse(key, value, "an integer")?,
            "impute_income" => self.impute_income = parse(key, value, "true or false")?,
            "synth_n" => self.synth_n = parse(key, value, "an integer")?,
            "synth_t" => self.synth_t = parse(key, value, "an integer")?,
            "synth_f" => self.synth_f = parse(key, value, "an integer")?,
            "latency_interval" => self.latency_interval = parse(key, value, "an integer")?,
            "noise_sigma" => self.noise_sigma = parse(key, value, "a number")?,
            "neighbor_min" => self.neighbor_min = parse(key, value, "an integer")?,
            "neighbor_max" => self.neighbor_max = parse(key, value, "an integer")?,
            "resample_max" => self.resample_max = parse(key, value, "an integer")?,
            "alpha" => self.alpha = parse(key, value, "a number")?,
            "beta" => self.beta = parse(key, value, "a number")?,
            "gamma" => self.gamma = parse(key, value, "a number")?,
            "omega" => self.omega = parse(key, value, "a number")?,
            "model" => {
                self.model = match value {
                    "latencynet" => ModelKind::Latencynet,
                    "gru" => ModelKind::Gru,
                    _ => bail!("config key `model` expects latencynet or gru, got `{value}`"),
                }
            }
            "gat_dim" => self.gat_dim = parse(key, value, "an integer")?,
            "heads" => self.heads = parse(key, value, "an integer")?,
            "sie_dim" => self.sie_dim = parse(key, value, "an integer")?,
            "sie_hidden" => self.sie_hidden = parse(key, value, "an integer")?,
            "attn_dim" => self.attn_dim = parse(key, value, "an integer")?,
            "hidden" => self.hidden = parse(key, value, "an integer")?,
            "filters" => self.filters = parse(key, value, "an integer")?,
            "kernel_len" => self.kernel_len = parse(key, value, "an integer")?,
            "dilations" => self.dilations = parse_list(key, value)?,
            "recal_hidden" => self.recal_hidden = parse(key, value, "an integer")?,
            "align_hidden" => self.align_hidden = parse(key, value, "an integer")?,
            "head_width" => self.head_width = parse(key, value, "an integer")?,
            "horizon" => self.horizon = parse(key, value, "an integer")?,
            "dropout" => self.dropout = parse(key, value, "a number")?,
            "leaky_slope" => self.leaky_slope = parse(key, value, "a number")?,
            "gru_hidden" => self.gru_hidden = parse(key, value, "an integer")?,
            "lr" => self.lr = parse(key, value, "a number")?,
            "epochs" => self.epochs = parse(key, value, "an integer")?,
            "refresh_epochs" => self.refresh_epochs = parse(key, value, "an integer")?,
            "seed" => self.seed = parse(key, value, "an integer")?,
            "batch" => {
                if value != "full" {
                    bail!("config key `batch` supports only `full` (whole-window training)");
                }
            }
            "mode" => {
                self.mode = match value {
                    "standard" => Mode::Standard,
                    "iterative" => Mode::Iterative,
                    "multistep" => Mode::Multistep,
                    _ => bail!(
                        "config key `mode` expects standard, iterative or multistep, got `{value}`"
                    ),
                }
            }
            "ablate" => {
                for name in value.split(',') {
                    self.add_ablation(name.trim())?;
                }
            }
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "device_threads" => self.device_threads = parse(key, value, "an integer")?,
            _ => bail!(
                "unknown config key `{key}`; valid keys: {}",
                VALID_KEYS.join(", ")
            ),
        }
        Ok(())
    }

    pub fn add_ablation(&mut self, name: &str) -> Result<()> {
        if !ABLATIONS.contains(&name) {
            bail!(
                "unknown ablation `{name}`; valid ablations: {}",
                ABLATIONS.join(", ")
            );
        }
        self.ablate.insert(name.to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                )
            })?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Multistep && self.horizon < 2 {
            bail!("multistep mode needs horizon >= 2 (got {})", self.horizon);
        }
        if self.horizon == 0 {
            bail!("horizon must be at least 1");
        }
        Ok(())
    }

    /// Resolved ablation switches plus any subsumption warnings.
    pub fn ablation(&self) -> (Ablation, Vec<String>) {
        let has = |n: &str| self.ablate.contains(n);
        let mut warnings = Vec::new();
        if has("no-latt") && (has("no-slatt") || has("no-tlatt")) {
            warnings.push(
                "no-latt already disables both latency attentions; no-slatt/no-tlatt are redundant"
                    .to_string(),
            );
        }
        (
            Ablation {
                no_slatt: has("no-latt") || has("no-slatt"),
                no_tlatt: has("no-latt") || has("no-tlatt"),
                no_align: has("no-align"),
            },
            warnings,
        )
    }

    pub fn split_mode(&self) -> SplitMode {
        match self.mode {
            Mode::Iterative => SplitMode::Iterative,
            Mode::Standard | Mode::Multistep => SplitMode::Standard,
        }
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            omega: self.omega,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n: self.synth_n,
            t: self.synth_t,
            f: self.synth_f,
            latency_interval: self.latency_interval,
            noise_sigma: self.noise_sigma,
            neighbor_min: self.neighbor_min,
            neighbor_max: self.neighbor_max,
            resample_max: self.resample_max,
            graph: self.graph_config(),
        }
    }

    /// Model dimensions for a dataset with `f` input features.
    pub fn model_config(&self, f: usize) -> ModelConfig {
        ModelConfig {
            f,
            gat_dim: self.gat_dim,
            heads: self.heads,
            sie_dim: self.sie_dim,
            sie_hidden: self.sie_hidden,
            attn_dim: self.attn_dim,
            hidden: self.hidden,
            filters: self.filters,
            kernel_len: self.kernel_len,
            dilations: self.dilations.clone(),
            recal_hidden: self.recal_hidden,
            align_hidden: self.align_hidden,
            head_width: self.head_width,
            horizon: self.horizon,
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn gru_config(&self, f: usize) -> GruConfig {
        GruConfig {
            f,
            hidden: self.gru_hidden,
            head_width: self.head_width,
            horizon: self.horizon,
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
        }
    }

    /// Dataset root: explicit key first, then LF_DATA_DIR.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.data_dir {
            return Ok(dir.clone());
        }
        if let Some(dir) = std::env::var_os("LF_DATA_DIR") {
            return Ok(PathBuf::from(dir));
        }
        bail!("no dataset: set the `data_dir` config key or the LF_DATA_DIR environment variable")
    }
}
