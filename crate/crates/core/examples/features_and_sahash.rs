//! Byte histograms, uneva counts and the modular baseline digest for a file
//! and a lightly mutated copy.
//!
//!     cargo run --example features_and_sahash [FILE]

use akash::features::{compute_uneva, extract_features, transform_counts, DEFAULT_SHIFT};
use akash::perturb::{substitute_bits, ProtectedRegions};
use akash::sahash::{sahash_digest, sahash_distance, sahash_modulus};
use akash::synth::synth_file;

fn main() -> akash::Result<()> {
    let bytes = match std::env::args().nth(1) {
        Some(p) => std::fs::read(p)?,
        None => synth_file(32 * 1024, 7),
    };
    let x = extract_features(&bytes, DEFAULT_SHIFT)?;
    let z = transform_counts(&x);
    let top = x.counts()[..256].iter().enumerate().max_by_key(|(_, c)| **c).unwrap();
    println!("{} bytes, most common byte 0x{:02x} ({} times)", x.file_length(), top.0, top.1);
    println!("log-damped input norm {:.3}", z.iter().map(|v| v * v).sum::<f64>().sqrt());

    let mutant = substitute_bits(&bytes, 100, &ProtectedRegions::none(), 1)?;
    let (da, db) = (sahash_digest(&x)?, sahash_digest(&extract_features(&mutant, DEFAULT_SHIFT)?)?);
    println!("modulus {}", sahash_modulus(x.file_length())?);
    println!("digest  {}...", &da.to_text()[..48]);
    println!("100 flipped bits: sahash distance {}", sahash_distance(&da, &db)?);
    println!("uneva distance {}", compute_uneva(&bytes)?.distance(&compute_uneva(&mutant)?));
    Ok(())
}
