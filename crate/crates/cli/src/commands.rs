//! Command implementations. Each command resolves its inputs, does the
//! work, writes its artifacts, and returns a one-line summary; on failure
//! every file it created is removed again.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use lfnet::checkpoint::{load_checkpoint, save_checkpoint, AnyModel, CheckpointMeta, ModelSpec};
use lfnet::data::load::load_dataset;
use lfnet::data::synth::{generate_threaded, write_dataset};
use lfnet::data::{prepare_inputs, split_dataset, Dataset, DatasetSplit, ModelInputs};
use lfnet::experiment::{
    evaluate, iterative_protocol, train, MetricSet, TrainConfig, TrainPlan, TrainReport,
};
use lfnet::geo::{self, LocationGraph};
use lfnet::model::{ForwardOptions, LatencyNet, WindowSpec};
use lfnet_autodiff::gradcheck::{self, LossEval};
use lfnet_autodiff::{EdgeIndex, Tensor};
use serde_json::json;

use crate::config::{ModelKind, RunConfig};

pub struct CommandResult {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

/// Tracks files created under an output directory so a failing command
/// leaves nothing behind.
struct OutDir {
    root: PathBuf,
    created: Vec<PathBuf>,
}

impl OutDir {
    fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)
            .with_context(|| format!("cannot create {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            created: Vec::new(),
        })
    }

    fn claim(&mut self, name: &str) -> PathBuf {
        let path = self.root.join(name);
        self.created.push(path.clone());
        path
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.claim(name);
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        self.write_text(name, &format!("{:#}\n", value))
    }

    fn discard(&self) {
        for path in &self.created {
            let _ = std::fs::remove_file(path);
        }
    }
}

fn with_outdir(
    out: &Path,
    run: impl FnOnce(&mut OutDir) -> Result<String>,
) -> Result<CommandResult> {
    let mut dir = OutDir::new(out)?;
    match run(&mut dir) {
        Ok(summary) => Ok(CommandResult {
            artifacts: dir.created,
            summary,
        }),
        Err(e) => {
            dir.discard();
            Err(e)
        }
    }
}

fn config_echo(cfg: &RunConfig, command: &str) -> serde_json::Value {
    json!({ "command": command, "config": cfg })
}

// ── gen-synth ───────────────────────────────────────────────────────────

pub fn gen_synth(cfg: &RunConfig, out: &Path) -> Result<CommandResult> {
    let synth_cfg = cfg.synth_config();
    let data = generate_threaded(cfg.seed, &synth_cfg, cfg.device_threads.max(1))?;
    with_outdir(out, |dir| {
        for name in [
            "locations.csv",
            "realtime.csv",
            "updates.csv",
            "targets.csv",
            "manifest.json",
        ] {
            dir.claim(name);
        }
        let manifest = write_dataset(&dir.root, &data, cfg.seed, &synth_cfg)?;
        let mut report = config_echo(cfg, "gen-synth");
        report["graph"] = graph_summary(&data.graph);
        report["checksums"] = serde_json::to_value(&manifest.checksums)?;
        dir.write_json("report.json", &report)?;
        Ok(format!(
            "gen-synth: {} locations x {} weeks x {} features (seed {}) -> {}",
            synth_cfg.n,
            synth_cfg.t,
            synth_cfg.f,
            cfg.seed,
            dir.root.display()
        ))
    })
}

// ── build-graph ─────────────────────────────────────────────────────────

fn graph_summary(graph: &LocationGraph) -> serde_json::Value {
    let (dmin, dmax) = graph.degree_range();
    json!({
        "nodes": graph.n,
        "edges": graph.edge_count(),
        "mean_degree": graph.mean_degree(),
        "degree_min": dmin,
        "degree_max": dmax,
    })
}

fn build_graph_for(cfg: &RunConfig, dir: &Path, locations: &[geo::SpatialFeatures]) -> Result<LocationGraph> {
    let graph_file = dir.join("graph.csv");
    let config = cfg.graph_config();
    if graph_file.exists() {
        let index = geo::id_index(locations);
        let edges = geo::load_graph_csv(&graph_file, &index)?;
        Ok(LocationGraph::build_with_edges(locations, &config, &edges)?)
    } else {
        Ok(LocationGraph::build(locations, &config)?)
    }
}

pub fn build_graph(cfg: &RunConfig, out: Option<&Path>) -> Result<CommandResult> {
    let data_dir = cfg.resolve_data_dir()?;
    let locations = geo::load_locations_csv(&data_dir.join("locations.csv"))?;
    let graph = build_graph_for(cfg, &data_dir, &locations)?;
    let (dmin, dmax) = graph.degree_range();
    let summary = format!(
        "graph: {} nodes, {} undirected edges, mean degree {:.2}, degree {}..{} (seed {})",
        graph.n,
        graph.edge_count(),
        graph.mean_degree(),
        dmin,
        dmax,
        cfg.seed,
    );
    match out {
        None => Ok(CommandResult {
            artifacts: Vec::new(),
            summary,
        }),
        Some(out) => with_outdir(out, |dir| {
            let mut report = config_echo(cfg, "build-graph");
            report["graph"] = graph_summary(&graph);
            dir.write_json("report.json", &report)?;
            Ok(summary.clone())
        }),
    }
}

// ── shared dataset plumbing ─────────────────────────────────────────────

struct Loaded {
    dataset: Dataset,
    split: DatasetSplit,
    inputs: ModelInputs,
    edges: Arc<EdgeIndex>,
    graph: LocationGraph,
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let data_dir = cfg.resolve_data_dir()?;
    let dataset = load_dataset(&data_dir, cfg.target_feature)?;
    let split = split_dataset(dataset.t(), cfg.split_mode())?;
    let inputs = prepare_inputs(&dataset, &split.train, cfg.target_feature, cfg.impute_income)?;
    let graph = build_graph_for(cfg, &data_dir, &dataset.locations)?;
    let edges = Arc::new(graph.edge_index());
    Ok(Loaded {
        dataset,
        split,
        inputs,
        edges,
        graph,
    })
}

fn metrics_csv(dataset: &Dataset, metrics: &MetricSet) -> String {
    let mut text = String::from("location_id,mae,rmse,mape\n");
    for (i, loc) in dataset.locations.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{},{}\n",
            loc.id,
            metrics.per_location_mae[i],
            metrics.per_location_rmse[i],
            metrics.per_location_mape[i]
        ));
    }
    text
}

fn report_json(report: &TrainReport, files: &[PathBuf]) -> serde_json::Value {
    json!({
        "train_losses": report.train_losses,
        "val_mse": report.val_mse,
        "grad_norms": report.grad_norms,
        "wall_secs": report.wall_secs,
        "secs_per_epoch": report.secs_per_epoch,
        "peak_tape_bytes": report.peak_tape_bytes,
        "diverged_at": report.diverged_at,
        "checkpoints": report
            .checkpoints
            .iter()
            .zip(files)
            .map(|(c, f)| {
                json!({
                    "slot": c.slot,
                    "epoch": c.epoch,
                    "criterion": c.criterion,
                    "file": f,
                })
            })
            .collect::<Vec<_>>(),
        "test_metrics": report.test_metrics,
        "best": report.checkpoints[report.best].slot,
    })
}

// ── train ───────────────────────────────────────────────────────────────

pub fn train_command(cfg: &RunConfig, out: &Path) -> Result<CommandResult> {
    let loaded = load(cfg)?;
    let plan = TrainPlan::standard(&loaded.split)?;
    let tc = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        seed: cfg.seed,
    };
    let (ablation, warnings) = cfg.ablation();
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let f = loaded.dataset.f();
    let (report, params_by_slot, spec): (TrainReport, Vec<BTreeMap<String, Tensor>>, ModelSpec) =
        match cfg.model {
            ModelKind::Latencynet => {
                let model_cfg = cfg.model_config(f);
                let mut model = LatencyNet::new(model_cfg.clone(), ablation, cfg.seed)?;
                let report = train(&mut model, &loaded.inputs, &loaded.edges, &plan, &tc)?;
                let params = report.checkpoints.iter().map(|c| c.params.clone()).collect();
                (
                    report,
                    params,
                    ModelSpec::Latencynet {
                        config: model_cfg,
                        ablation,
                    },
                )
            }
            ModelKind::Gru => {
                if !cfg.ablate.is_empty() {
                    bail!("ablations apply to the latencynet model only");
                }
                let gru_cfg = cfg.gru_config(f);
                let mut model = lfnet::model::BaselineGru::new(gru_cfg.clone(), cfg.seed)?;
                let report = train(&mut model, &loaded.inputs, &loaded.edges, &plan, &tc)?;
                let params = report.checkpoints.iter().map(|c| c.params.clone()).collect();
                (report, params, ModelSpec::Gru { config: gru_cfg })
            }
        };

    with_outdir(out, |dir| {
        let mut files = Vec::new();
        for (checkpoint, params) in report.checkpoints.iter().zip(&params_by_slot) {
            let file = dir.claim(&format!("ckpt-{}.lfnet", checkpoint.slot));
            dir.claim(&format!("ckpt-{}.lfnet.json", checkpoint.slot));
            let meta = CheckpointMeta {
                spec: spec.clone(),
                seed: cfg.seed,
                normalizer: loaded.inputs.normalizer.clone(),
            };
            save_checkpoint(&file, params, &meta)?;
            files.push(file);
        }

        let mut curve = String::from("epoch,train_loss,val_mse\n");
        for (epoch, (loss, val)) in report.train_losses.iter().zip(&report.val_mse).enumerate() {
            curve.push_str(&format!("{epoch},{loss},{val}\n"));
        }
        dir.write_text("loss_curve.csv", &curve)?;
        dir.write_text("report.csv", &metrics_csv(&loaded.dataset, report.best_metrics()))?;

        let mut echo = config_echo(cfg, "train");
        echo["dataset"] = json!({
            "n": loaded.dataset.n(),
            "t": loaded.dataset.t(),
            "f": loaded.dataset.f(),
            "split": loaded.split,
        });
        echo["graph"] = graph_summary(&loaded.graph);
        echo["ablation_warnings"] = json!(warnings);
        echo["train"] = report_json(&report, &files);
        dir.write_json("report.json", &echo)?;

        let best = report.best_metrics();
        Ok(format!(
            "train[{}]: best checkpoint `{}` test MAE {:.4}, RMSE {:.4}, MAPE {:.2}% (seed {}) -> {}",
            match cfg.model {
                ModelKind::Latencynet => "latencynet",
                ModelKind::Gru => "gru",
            },
            report.checkpoints[report.best].slot,
            best.mae,
            best.rmse,
            best.mape,
            cfg.seed,
            dir.root.display()
        ))
    })
}

// ── eval ────────────────────────────────────────────────────────────────

fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.checkpoint
        .clone()
        .ok_or_else(|| anyhow!("set the `checkpoint` config key to a trained model file"))
}

pub fn eval_command(cfg: &RunConfig, out: &Path) -> Result<CommandResult> {
    let path = checkpoint_path(cfg)?;
    let (model, meta) = load_checkpoint(&path)?;
    let loaded = load(cfg)?;
    if meta.normalizer != loaded.inputs.normalizer {
        eprintln!(
            "warning: checkpoint was trained under different normalization statistics; \
             scoring with this dataset's own"
        );
    }
    let plan = TrainPlan::standard(&loaded.split)?;
    let (metrics, _) = match &model {
        AnyModel::Latency(m) => evaluate(m, &loaded.inputs, &loaded.edges, &plan.test, None)?,
        AnyModel::Gru(m) => evaluate(m, &loaded.inputs, &loaded.edges, &plan.test, None)?,
    };

    with_outdir(out, |dir| {
        dir.write_text("report.csv", &metrics_csv(&loaded.dataset, &metrics))?;
        let mut echo = config_echo(cfg, "eval");
        echo["checkpoint"] = json!(path);
        echo["checkpoint_seed"] = json!(meta.seed);
        echo["test_window"] = json!(loaded.split.test);
        echo["metrics"] = serde_json::to_value(&metrics)?;
        dir.write_json("report.json", &echo)?;
        Ok(format!(
            "eval[{}]: test MAE {:.4}, RMSE {:.4}, MAPE {:.2}% over {} pairs ({} zero-target excluded) (seed {})",
            path.display(),
            metrics.mae,
            metrics.rmse,
            metrics.mape,
            metrics.pairs,
            metrics.mape_excluded,
            cfg.seed,
        ))
    })
}

// ── predict ─────────────────────────────────────────────────────────────

pub fn predict_command(cfg: &RunConfig, out: &Path) -> Result<CommandResult> {
    let path = checkpoint_path(cfg)?;
    let (model, _) = load_checkpoint(&path)?;
    let loaded = load(cfg)?;
    let t = loaded.dataset.t();
    let window = WindowSpec::full(0..t)?;
    let run = match &model {
        AnyModel::Latency(m) => m.forward(
            &loaded.inputs,
            &loaded.edges,
            &window,
            ForwardOptions::default(),
        )?,
        AnyModel::Gru(m) => m.forward(&loaded.inputs, &window, ForwardOptions::default())?,
    };
    let (_, last) = run
        .predictions
        .last()
        .ok_or_else(|| anyhow!("the forward pass produced no predictions"))?;
    let horizon = model.horizon();

    with_outdir(out, |dir| {
        let mut csv = String::from("location_id");
        for h in 1..=horizon {
            csv.push_str(&format!(",week_plus_{h}"));
        }
        csv.push('\n');
        for (i, loc) in loaded.dataset.locations.iter().enumerate() {
            csv.push_str(&loc.id);
            for h in 0..horizon {
                let denorm = loaded
                    .inputs
                    .normalizer
                    .denormalize_y(i, last.data()[i * horizon + h]);
                csv.push_str(&format!(",{denorm}"));
            }
            csv.push('\n');
        }
        dir.write_text("predictions.csv", &csv)?;
        let mut echo = config_echo(cfg, "predict");
        echo["checkpoint"] = json!(path);
        echo["forecast_origin_week"] = json!(t - 1);
        echo["horizon"] = json!(horizon);
        dir.write_json("report.json", &echo)?;
        Ok(format!(
            "predict: {} locations x {} weeks ahead from week {} (seed {}) -> predictions.csv",
            loaded.dataset.n(),
            horizon,
            t - 1,
            cfg.seed,
        ))
    })
}

// ── update (iterative protocol) ─────────────────────────────────────────

fn arm_json(report: &TrainReport) -> serde_json::Value {
    json!({
        "epochs": report.train_losses.len(),
        "final_train_loss": report.train_losses.last(),
        "wall_secs": report.wall_secs,
        "secs_per_epoch": report.secs_per_epoch,
        "peak_tape_bytes": report.peak_tape_bytes,
        "diverged_at": report.diverged_at,
        "best": report.checkpoints[report.best].slot,
        "best_metrics": report.best_metrics(),
    })
}

pub fn update_command(cfg: &RunConfig, out: &Path) -> Result<CommandResult> {
    if cfg.split_mode() != lfnet::data::SplitMode::Iterative {
        bail!("update needs `mode = iterative` so the deployment phases exist");
    }
    if cfg.model != ModelKind::Latencynet {
        bail!("update compares latencynet refresh arms; it has no gru variant");
    }
    let loaded = load(cfg)?;
    let (_, warnings) = cfg.ablation();
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if !cfg.ablate.is_empty() {
        eprintln!("warning: update always runs the full model against its no-align arm; ablations ignored");
    }
    let phase1 = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        seed: cfg.seed,
    };
    let refresh = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.refresh_epochs,
        seed: cfg.seed,
    };
    let outcome = iterative_protocol(
        &loaded.inputs,
        &loaded.edges,
        &loaded.split,
        &cfg.model_config(loaded.dataset.f()),
        &phase1,
        &refresh,
    )?;

    with_outdir(out, |dir| {
        dir.write_text(
            "report.csv",
            &metrics_csv(&loaded.dataset, &outcome.warm.final_test),
        )?;
        let mut echo = config_echo(cfg, "update");
        echo["final_window"] = json!(outcome.final_window);
        echo["warm"] = json!({
            "phase1": arm_json(&outcome.warm.phase1),
            "refresh": outcome.warm.refresh.as_ref().map(arm_json),
            "final_test": outcome.warm.final_test,
        });
        echo["cold"] = json!({
            "phase1": arm_json(&outcome.cold.phase1),
            "refresh": outcome.cold.refresh.as_ref().map(arm_json),
            "final_test": outcome.cold.final_test,
        });
        echo["full_history"] = arm_json(&outcome.full_history);
        dir.write_json("report.json", &echo)?;

        let refresh_cost = outcome
            .warm
            .refresh
            .as_ref()
            .map(|r| (r.peak_tape_bytes, r.secs_per_epoch));
        Ok(match refresh_cost {
            Some((bytes, secs)) => format!(
                "update: warm MAE {:.4} vs cold {:.4}; refresh {:.1} MB / {:.2} s per epoch vs full history {:.1} MB / {:.2} s (seed {})",
                outcome.warm.final_test.mae,
                outcome.cold.final_test.mae,
                bytes as f64 / 1e6,
                secs,
                outcome.full_history.peak_tape_bytes as f64 / 1e6,
                outcome.full_history.secs_per_epoch,
                cfg.seed,
            ),
            None => format!(
                "update: refresh window too short to train; phase-1 models stand (warm MAE {:.4}, seed {})",
                outcome.warm.final_test.mae, cfg.seed,
            ),
        })
    })
}

// ── gradcheck ───────────────────────────────────────────────────────────

pub fn gradcheck_command(cfg: &RunConfig, out: Option<&Path>) -> Result<CommandResult> {
    use lfnet::model::{Ablation, ModelConfig};

    let started = Instant::now();
    let probe_cfg = ModelConfig {
        f: 2,
        gat_dim: 2,
        heads: 2,
        sie_dim: 2,
        sie_hidden: 2,
        attn_dim: 2,
        hidden: 3,
        filters: 2,
        kernel_len: 2,
        dilations: vec![1, 2],
        recal_hidden: 2,
        align_hidden: 4,
        head_width: 3,
        horizon: 1,
        dropout: 0.0,
        leaky_slope: 0.2,
    };
    let (n, t) = (3, 4);
    let model = LatencyNet::new(probe_cfg.clone(), Ablation::default(), cfg.seed)?;
    let inputs = probe_inputs(n, t, probe_cfg.f, cfg.seed ^ 0x9e3779b97f4a7c15);
    let edges = Arc::new(EdgeIndex::from_neighbor_lists(
        &(0..n).map(|_| (0..n).collect()).collect::<Vec<_>>(),
    ));
    let window = WindowSpec::full(0..t)?;

    let mut run = model.forward(&inputs, &edges, &window, ForwardOptions::default())?;
    run.tape.backward(run.loss)?;
    let analytic: BTreeMap<String, Vec<f64>> = run
        .vars
        .iter()
        .map(|(name, &var)| (name.clone(), run.tape.grad_or_zeros(var)))
        .collect();
    let eval = |params: &BTreeMap<String, Tensor>| -> lfnet_autodiff::Result<LossEval> {
        let probe = LatencyNet {
            config: probe_cfg.clone(),
            ablation: Ablation::default(),
            params: params.clone(),
        };
        let run = probe
            .forward(&inputs, &edges, &window, ForwardOptions::default())
            .map_err(|e| lfnet_autodiff::Error::Invalid {
                op: "forward",
                msg: e.to_string(),
            })?;
        let (kink_hash, on_kink) = run.tape.kink_signature();
        Ok(LossEval {
            loss: run.tape.value(run.loss).data()[0],
            kink_hash,
            on_kink,
        })
    };
    let report = gradcheck::audit(eval, &model.params, &analytic, 1e-5)?;
    let elapsed = started.elapsed().as_secs_f64();

    let summary = format!(
        "gradcheck: worst relative error {:.3e} at {} over {} coordinates ({} kink-straddling skipped) in {:.1}s (seed {})",
        report.worst_rel_err,
        report
            .worst_coordinate
            .as_ref()
            .map(|(name, idx)| format!("{name}[{idx}]"))
            .unwrap_or_else(|| "-".into()),
        report.checked,
        report.skipped_kinks,
        elapsed,
        cfg.seed,
    );
    let result = json!({
        "worst_rel_err": report.worst_rel_err,
        "checked": report.checked,
        "skipped_kinks": report.skipped_kinks,
        "non_finite": report.non_finite,
        "elapsed_secs": elapsed,
    });

    let command_result = match out {
        None => CommandResult {
            artifacts: Vec::new(),
            summary: summary.clone(),
        },
        Some(out) => with_outdir(out, |dir| {
            let mut echo = config_echo(cfg, "gradcheck");
            echo["audit"] = result.clone();
            dir.write_json("report.json", &echo)?;
            Ok(summary.clone())
        })?,
    };
    if report.worst_rel_err >= 1e-4 || report.non_finite > 0 {
        bail!("{summary}");
    }
    Ok(command_result)
}

fn probe_inputs(n: usize, t: usize, f: usize, seed: u64) -> ModelInputs {
    use lfnet::data::{Array2, Array3, Normalizer, Stats, STATIC_FIELDS};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array3::zeros(n, t, f);
    let mut u = Array3::zeros(n, t, f);
    for v in x.data.iter_mut().chain(u.data.iter_mut()) {
        *v = rng.gen_range(-0.8..0.8);
    }
    let mut y = Array2::zeros(n, t);
    let mut y_u = Array2::zeros(n, t);
    for v in y.data.iter_mut().chain(y_u.data.iter_mut()) {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut delta_t = Array2::zeros(n, t);
    for v in delta_t.data.iter_mut() {
        *v = rng.gen_range(0..9) as f64;
    }
    let mut statics = vec![0.0; n * STATIC_FIELDS.len()];
    for v in statics.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let per = |len: usize| Stats {
        mean: vec![0.0; len],
        std: vec![1.0; len],
    };
    ModelInputs {
        x,
        u,
        y,
        y_u,
        delta_t,
        statics,
        normalizer: Normalizer {
            x: per(n * f),
            u: per(n * f),
            y: per(n),
            statics: per(STATIC_FIELDS.len()),
            floored: 0,
            target_feature: 0,
            f,
        },
    }
}
