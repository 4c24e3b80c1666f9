//! Writes a small seeded corpus to a directory, ready for `akash train`.
//!
//!     cargo run --example synth_corpus -- /tmp/corpus 100

use akash::synth::{synth_corpus, SynthConfig};

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "corpus".into());
    let files = args.next().and_then(|n| n.parse().ok()).unwrap_or(100);
    std::fs::create_dir_all(&dir)?;
    let corpus = synth_corpus(&SynthConfig { files, seed: 1, ..Default::default() });
    let total: usize = corpus.iter().map(Vec::len).sum();
    for (i, f) in corpus.iter().enumerate() {
        std::fs::write(format!("{dir}/synth_{i:04}.bin"), f)?;
    }
    println!("{files} files, {total} bytes in {dir}");
    Ok(())
}
