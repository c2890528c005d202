use std::time::Instant;

use lfnet::data::synth::{generate, SynthConfig};
use lfnet::data::{prepare_inputs, split_dataset, ModelInputs, SplitMode};
use lfnet::experiment::{train, Forecaster, TrainConfig, TrainPlan};
use lfnet::geo::LocationGraph;
use lfnet::model::{Ablation, BaselineGru, GruConfig, LatencyNet, ModelConfig};
use std::sync::Arc;

use lfnet_autodiff::EdgeIndex;

const SEEDS: [u64; 3] = [1, 2, 3];

fn desk_model(dropout: f64) -> ModelConfig {
    ModelConfig {
        f: 22,
        gat_dim: 16,
        heads: 1,
        sie_dim: 16,
        sie_hidden: 16,
        attn_dim: 16,
        hidden: 64,
        filters: 8,
        kernel_len: 3,
        dilations: vec![1, 3, 5],
        recal_hidden: 32,
        align_hidden: 64,
        head_width: 64,
        horizon: 1,
        dropout,
        leaky_slope: 0.2,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn full_arm(
    inputs: &ModelInputs,
    edges: &Arc<EdgeIndex>,
    plan: &TrainPlan,
    cfg: &ModelConfig,
    lr: f64,
    epochs: usize,
) -> (Vec<f64>, f64) {
    let mut maes = Vec::new();
    let t0 = Instant::now();
    for seed in SEEDS {
        let mut model = LatencyNet::new(cfg.clone(), Ablation::default(), seed).unwrap();
        let report = train(
            &mut model,
            inputs,
            edges,
            plan,
            &TrainConfig { lr, epochs, seed },
        )
        .unwrap();
        maes.push(report.best_metrics().mae);
    }
    (maes, t0.elapsed().as_secs_f64())
}

fn gru_arm(
    inputs: &ModelInputs,
    edges: &Arc<EdgeIndex>,
    plan: &TrainPlan,
    lr: f64,
    epochs: usize,
) -> (Vec<f64>, f64) {
    let cfg = GruConfig {
        f: 22,
        ..GruConfig::default()
    };
    let mut maes = Vec::new();
    let t0 = Instant::now();
    for seed in SEEDS {
        let mut model = BaselineGru::new(cfg.clone(), seed).unwrap();
        let report = train(
            &mut model,
            inputs,
            edges,
            plan,
            &TrainConfig { lr, epochs, seed },
        )
        .unwrap();
        maes.push(report.best_metrics().mae);
    }
    (maes, t0.elapsed().as_secs_f64())
}

fn show(tag: &str, maes: &[f64], secs: f64, epochs: usize) {
    let (m, s) = mean_std(maes);
    println!(
        "{tag}: mae {m:.3} +- {s:.3}  ({:.2} s/ep)  {maes:.2?}",
        secs / (SEEDS.len() * epochs) as f64
    );
}

fn main() {
    for sigma in [2.0, 3.0] {
        let synth = SynthConfig {
            n: 100,
            t: 63,
            f: 22,
            noise_sigma: sigma,
            ..SynthConfig::default()
        };
        let data = generate(42, &synth).unwrap();
        let split = split_dataset(data.dataset.t(), SplitMode::Standard).unwrap();
        let inputs = prepare_inputs(&data.dataset, &split.train, 0, true).unwrap();
        let edges = Arc::new(data.graph.edge_index());
        let plan = TrainPlan::standard(&split).unwrap();

        println!("== sigma {sigma} ==");
        let (maes_g, secs_g) = gru_arm(&inputs, &edges, &plan, 0.001, 200);
        show("gru h128 d0.5", &maes_g, secs_g, 200);
        let (maes_f, secs_f) = full_arm(&inputs, &edges, &plan, &desk_model(0.1), 0.001, 200);
        show("full k1 d0.1", &maes_f, secs_f, 200);
        let (mg, _) = mean_std(&maes_g);
        let (mf, _) = mean_std(&maes_f);
        println!("gap vs gru: {:+.1}%", 100.0 * (mf - mg) / mg);
    }
}
