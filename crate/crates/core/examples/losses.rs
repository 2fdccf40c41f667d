//! The objective's pieces on small hand-made batches: prediction loss, the
//! three VICReg terms, their weighted sum and one EMA step.
//!
//! `cargo run --example losses`

use ndarray::array;
use rejepa::losses::{covariance_term, invariance_term, prediction_loss, total_loss, variance_term, vicreg_loss, VicregConfig};

fn main() -> rejepa::Result<()> {
    let cfg = VicregConfig::default();

    // two rows per dimension at distance 0.2 => std 0.1414
    let z = array![[0.0, 0.0], [0.2, 0.2]];
    println!("variance term (collapsed-ish batch): {:.6}", variance_term(&z, cfg.gamma, cfg.epsilon)?);
    let spread = array![[-2.0, 1.0], [2.0, -1.0], [0.0, 0.5], [1.0, -0.5]];
    println!("variance term (spread batch):         {:.6}", variance_term(&spread, cfg.gamma, cfg.epsilon)?);
    println!("covariance term (spread batch):       {:.6}", covariance_term(&spread)?);

    let shifted = &spread + 0.5;
    println!("invariance term (shift by 0.5):       {:.6}", invariance_term(&spread, &shifted)?);

    let pred = vec![spread.clone()];
    let target = vec![shifted.clone()];
    let l_pred = prediction_loss(&pred, &target)?;
    let vic = vicreg_loss(&spread, &spread, &shifted, &cfg)?;
    println!("L_pred {l_pred:.4}; VICReg {vic:?}");
    println!("total {:.4}", total_loss(l_pred, vic.total)?);

    // target <- m * target + (1 - m) * context
    let (m, target_w, context_w) = (0.996, 2.0, 1.0);
    println!("EMA step m={m}: {} -> {}", target_w, target_w + (1.0 - m) * (context_w - target_w));
    Ok(())
}
