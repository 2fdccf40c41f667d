//! A small VICReg on/off ablation: 2 settings x 2 trials, printed as CSV.
//! The model is tiny and trains 4 epochs, so the numbers only show the
//! plumbing.
//!
//! `cargo run --release --example ablation -- [spec.toml]`
//!
//! `configs/ablation-vicreg.toml` is the full-size sweep.

use std::path::PathBuf;

use rejepa::ablation::{run_ablation, AblationAxis, AblationOptions, AblationSpec, Setting, TrialRecord};
use rejepa::config::RunConfig;

fn small() -> AblationSpec {
    let mut base = RunConfig::default();
    base.data.synthetic.n_images = 192;
    base.data.holdout = 64;
    base.model.encoder.depth = 1;
    base.model.encoder.embed_dim = 16;
    base.model.predictor.embed_dim = 8;
    base.model.predictor.depth = 1;
    base.train.epochs = 4;
    base.train.warmup_epochs = 1;
    AblationSpec::new(AblationAxis::Vicreg, vec![Setting::Flag(true), Setting::Flag(false)], 2, base)
}

fn main() -> rejepa::Result<()> {
    let spec = match std::env::args().nth(1) {
        Some(path) => AblationSpec::load(&PathBuf::from(path))?,
        None => small(),
    };
    let data = spec.base().prepare_data()?;
    let mut progress = |t: &TrialRecord| println!("{}={} trial {} seed {}: F1 {:?}", spec.axis, t.setting, t.trial, t.seed, t.f1);
    let table = run_ablation(
        &spec,
        &data.train,
        &data.holdout,
        AblationOptions {
            runs_dir: Some(std::env::temp_dir().join("rejepa-ablation")),
            on_trial: Some(&mut progress),
        },
    )?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", table.to_csv());
    Ok(())
}
