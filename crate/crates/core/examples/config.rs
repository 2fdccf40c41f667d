//! Load the shipped default run config and show how a broken file is
//! reported: every unknown key and out-of-range value at once.
//!
//! `cargo run --example config`

use rejepa::config::RunConfig;
use rejepa::Error;

fn main() -> rejepa::Result<()> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml");
    let cfg = RunConfig::load(&path)?;
    println!(
        "default: {} images, encoder {}x{} ({} tokens), {} epochs, mask {:?} {}",
        cfg.data.synthetic.n_images,
        cfg.model.encoder.embed_dim,
        cfg.model.encoder.depth,
        cfg.model.encoder.n_tokens(),
        cfg.train.epochs,
        cfg.train.mask.strategy,
        cfg.train.mask.target_ratio
    );

    let broken = "schema_version = 1\n[train]\nepoch = 10\nbatch_size = 0\n[train.mask]\ntarget_ratio = 1.5\n[retrieval]\nk = 500\n";
    match RunConfig::from_toml_str(broken) {
        Err(Error::Config(fields)) => {
            println!("broken config, {} problems:", fields.len());
            for f in fields {
                println!("  {f}");
            }
        }
        other => println!("unexpected: {other:?}"),
    }
    Ok(())
}
