//! Pretrain on the synthetic archive and report held-out retrieval F1.
//!
//! `cargo run --release --example train_synthetic -- [config.toml]`
//!
//! Without an argument the default model trains for 20 epochs (about 20 s);
//! pass `configs/default.toml` for the full 100-epoch run.

use std::path::PathBuf;

use rejepa::config::RunConfig;
use rejepa::retrieval::evaluate_model;
use rejepa::training::{fit, FitOptions, TrainState};

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 20;
    cfg.train.warmup_epochs = 3;
    cfg.output.dir = std::env::temp_dir().join("rejepa-train-synthetic");
    cfg
}

fn main() -> rejepa::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(&PathBuf::from(path))?,
        None => small(),
    };
    cfg.validate()?;
    let data = cfg.prepare_data()?;
    let mut state = TrainState::new(cfg.model.clone(), cfg.train.clone(), data.train.len())?;

    let before = evaluate_model(&state.model, &data.holdout, cfg.retrieval.metric, cfg.retrieval.k)?;
    println!("{} train / {} held-out images; F1@{} at init {:.4}", data.train.len(), data.holdout.len(), cfg.retrieval.k, before.mean_f1);

    let opts = FitOptions {
        checkpoint_dir: Some(cfg.output.dir.clone()),
        metrics_path: Some(cfg.output.dir.join("metrics.ndjson")),
        stop_at_step: None,
    };
    let _ = std::fs::remove_file(cfg.output.dir.join("metrics.ndjson"));
    fit(&mut state, &data.train, &opts)?;

    let spe = state.steps_per_epoch() as usize;
    println!("epoch   total   L_pred       v       c  embed_std");
    for m in state.history.iter().skip(spe - 1).step_by(spe) {
        println!("{:>5} {:>7.3} {:>8.4} {:>7.4} {:>7.4} {:>10.4}", m.epoch, m.total, m.l_pred, m.v, m.c, m.embed_std);
    }
    let after = evaluate_model(&state.model, &data.holdout, cfg.retrieval.metric, cfg.retrieval.k)?;
    println!("F1@{} after {} epochs: {:.4}", cfg.retrieval.k, state.epoch, after.mean_f1);
    println!("artifacts in {}", cfg.output.dir.display());
    Ok(())
}
