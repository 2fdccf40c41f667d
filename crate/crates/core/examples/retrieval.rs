//! Index an archive, query it, evaluate F1@k and round-trip the index file.
//!
//! `cargo run --release --example retrieval`

use rejepa::data::{generate_synthetic_archive, SyntheticConfig};
use rejepa::model::{EncoderConfig, ModelConfig, ModelState, PredictorConfig};
use rejepa::retrieval::{build_index, evaluate_archive, label_permutation_null, load_index, query, save_index, Metric};

fn main() -> rejepa::Result<()> {
    let records = generate_synthetic_archive(&SyntheticConfig::new(120, 4, 3, 32, 5))?;
    let config = ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 32,
            depth: 2,
            ..EncoderConfig::default()
        },
        predictor: PredictorConfig {
            embed_dim: 16,
            ..PredictorConfig::default()
        },
    };
    // an untrained encoder is enough to exercise the plumbing
    let model = ModelState::new(config, 0)?;

    for metric in [Metric::Euclidean, Metric::Cosine] {
        let index = build_index(&model, &records, metric)?;
        let q = &records[0];
        let row = index.position(&q.id).expect("indexed");
        let hits = query(&index, index.matrix.row(row), 5, Some(&q.id))?;
        println!("{metric}: neighbours of {} {:?}", q.id, q.labels);
        for n in &hits {
            let labels = &index.labels[index.position(&n.id).unwrap()];
            println!("  {:<16} {:>8.4} {:?}", n.id, n.distance, labels);
        }
        let report = evaluate_archive(&index, &index, 10)?;
        let (null_mean, null_std) = label_permutation_null(&index, 10, 50, 1)?;
        println!("  F1@10 {:.4} (label-permutation null {:.4} +- {:.4})", report.mean_f1, null_mean, null_std);
    }

    let index = build_index(&model, &records, Metric::Euclidean)?;
    let path = std::env::temp_dir().join("rejepa-example.index");
    save_index(&index, &path)?;
    println!("index file round trip exact: {}", load_index(&path)? == index);
    Ok(())
}
