//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rejepa::config::RunConfig;
use rejepa::data::{generate_synthetic_archive, patchify, PatchSequence, SyntheticConfig};
use rejepa::losses::VicregConfig;
use rejepa::masking::{sample_mask, MaskConfig, MaskPair};
use rejepa::model::{EncoderConfig, ModelConfig, ModelState, PredictorConfig};
use rejepa::nn::Parameters;

pub fn toy_network() -> (ModelState, Vec<PatchSequence>, Vec<MaskPair>) {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 16,
            depth: 2,
            n_heads: 2,
            patch_size: 4,
            mlp_ratio: 2.0,
            input_bands: 2,
            image_size: 16,
        },
        predictor: PredictorConfig {
            embed_dim: 8,
            depth: 2,
            n_heads: 2,
            mlp_ratio: 2.0,
        },
    };
    let mut model = ModelState::new(cfg, 11).unwrap();
    // larger weights so every path carries signal
    for p in model.trainable_params_mut() {
        p.iter_mut().for_each(|v| *v *= 8.0);
    }
    let synth = SyntheticConfig::new(4, 4, 2, 16, 2);
    let recs = generate_synthetic_archive(&synth).unwrap();
    let patches: Vec<_> = recs.iter().map(|r| patchify(&r.image, 4).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let masks = (0..4)
        .map(|_| sample_mask((4, 4), &MaskConfig::multi_block(0.3), &mut rng).unwrap())
        .collect();
    (model, patches, masks)
}

/// Central-difference check of `n` random trainable parameters of the toy
/// network; returns the worst relative error and panics above `tol`.
pub fn check_network_gradients(vicreg: VicregConfig, n: usize, tol: f64) -> f64 {
    let (model, patches, masks) = toy_network();
    let (_, grads) = model.loss_and_grad(&patches, &masks, &vicreg).unwrap();
    let named = grads.named_params("");
    let flat: Vec<(usize, usize, f64)> = named
        .iter()
        .enumerate()
        .flat_map(|(t, (_, g))| g.iter().enumerate().map(move |(i, &v)| (t, i, v)))
        .filter(|(_, _, v)| v.abs() > 1e-6)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let picks = sample(&mut rng, flat.len(), n);
    let loss = |m: &ModelState| m.batch_loss(&patches, &masks, &vicreg).unwrap().total;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in picks {
        let (t, i, analytic) = flat[k];
        let mut plus = model.clone();
        plus.trainable_params_mut()[t][i] += h;
        let mut minus = model.clone();
        minus.trainable_params_mut()[t][i] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        assert!(rel <= tol, "{}[{i}]: analytic {analytic}, numeric {numeric}", named[t].0);
    }
    worst
}

/// A run config small enough to train in well under a second.
pub fn tiny_run_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            patch_size: 4,
            mlp_ratio: 2.0,
            input_bands: 2,
            image_size: 16,
        },
        predictor: PredictorConfig {
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            mlp_ratio: 2.0,
        },
    };
    cfg.data.synthetic = SyntheticConfig::new(24, 4, 2, 16, 3);
    cfg.data.holdout = 8;
    cfg.train.epochs = 2;
    cfg.train.warmup_epochs = 0;
    cfg.train.batch_size = 4;
    cfg.retrieval.k = 3;
    cfg.output.dir = out.to_path_buf();
    cfg
}
