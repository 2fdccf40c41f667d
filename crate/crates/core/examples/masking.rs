//! Context/target masks on an 8x8 token grid for both strategies.
//!
//! `cargo run --example masking -- [ratio]`

use rejepa::masking::{sample_mask, MaskConfig};
use rejepa::rng::{derive_rng, Stream};

fn draw(grid: (usize, usize), pair: &rejepa::masking::MaskPair) {
    let mut cells = vec!['.'; grid.0 * grid.1];
    for (g, group) in pair.targets.iter().enumerate() {
        for &i in group {
            cells[i] = char::from(b'A' + g as u8);
        }
    }
    for row in cells.chunks(grid.1) {
        println!("  {}", row.iter().collect::<String>());
    }
}

fn main() -> rejepa::Result<()> {
    let ratio: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let grid = (8, 8);
    for cfg in [MaskConfig::random(ratio), MaskConfig::multi_block(ratio)] {
        cfg.validate_for(grid.0 * grid.1)?;
        println!("{:?}, ratio {ratio}, {} group(s); '.' = context", cfg.strategy, cfg.n_target_groups);
        for sample in 0..2 {
            let mut rng = derive_rng(0, Stream::Mask, 0, sample);
            let pair = sample_mask(grid, &cfg, &mut rng)?;
            println!(
                " sample {sample}: {} context, {} target tokens",
                pair.context.len(),
                pair.target_count()
            );
            draw(grid, &pair);
        }
    }
    Ok(())
}
