//! Patch tokenization of a multispectral image and its exact inverse.
//!
//! `cargo run --example tokenize`

use rejepa::data::{generate_synthetic_archive, patchify, unpatchify, SyntheticConfig};

fn main() -> rejepa::Result<()> {
    let records = generate_synthetic_archive(&SyntheticConfig::new(8, 4, 3, 32, 7))?;
    let rec = &records[0];
    let img = &rec.image;
    println!("{} labels={:?} shape {}x{}x{}", rec.id, rec.labels, img.bands(), img.height(), img.width());

    for p in [4, 8, 16] {
        let seq = patchify(img, p)?;
        let back = unpatchify(&seq)?;
        println!(
            "patch {p:>2}: {:>3} tokens of dim {:>3}, round trip exact: {}",
            seq.len(),
            seq.token_dim(),
            back == *img
        );
    }

    // 13 does not divide 32
    match patchify(img, 13) {
        Ok(_) => println!("unexpected success"),
        Err(e) => println!("patch 13: {e}"),
    }
    Ok(())
}
