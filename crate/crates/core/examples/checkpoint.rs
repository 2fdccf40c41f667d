//! Interrupt training, reload the checkpoint and finish: the result is
//! bit-identical to an uninterrupted run.
//!
//! `cargo run --release --example checkpoint`

use rejepa::config::RunConfig;
use rejepa::training::{fit, load_checkpoint, FitOptions, TrainState, LATEST_CHECKPOINT};

fn main() -> rejepa::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic.n_images = 96;
    cfg.data.holdout = 32;
    cfg.model.encoder.depth = 1;
    cfg.model.encoder.embed_dim = 16;
    cfg.model.predictor.embed_dim = 8;
    cfg.model.predictor.depth = 1;
    cfg.train.epochs = 3;
    cfg.train.warmup_epochs = 1;
    let data = cfg.prepare_data()?;
    let fresh = || TrainState::new(cfg.model.clone(), cfg.train.clone(), data.train.len());

    let mut straight = fresh()?;
    fit(&mut straight, &data.train, &FitOptions::default())?;

    let dir = std::env::temp_dir().join("rejepa-checkpoint-example");
    let opts = FitOptions {
        checkpoint_dir: Some(dir.clone()),
        stop_at_step: Some(3),
        ..Default::default()
    };
    let mut first = fresh()?;
    fit(&mut first, &data.train, &opts)?;
    println!("stopped at step {} of {}", first.step, first.total_steps());
    drop(first);

    let mut resumed = load_checkpoint(&dir.join(LATEST_CHECKPOINT))?;
    fit(&mut resumed, &data.train, &FitOptions::default())?;
    println!("resumed run finished at step {}", resumed.step);
    println!("identical to the uninterrupted run: {}", resumed == straight);
    Ok(())
}
