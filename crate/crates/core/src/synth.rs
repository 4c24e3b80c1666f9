//! Seeded synthetic corpus of structured binary-like files.
//!
//! Each file gets its own byte palette and is assembled from repeated
//! blocks, palette-biased runs, constant fills and uniform random segments,
//! so distinct files have distinct but realistic-looking histograms.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trainer::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub files: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { files: 500, min_len: 4 * 1024, max_len: 64 * 1024, seed: 0 }
    }
}

struct Palette {
    values: Vec<u8>,
    weights: WeightedIndex<f64>,
}

impl Palette {
    fn sample(rng: &mut ChaCha8Rng) -> Palette {
        let k = rng.random_range(4..=48);
        let mut values: Vec<u8> = rand::seq::index::sample(rng, 256, k).into_iter().map(|v| v as u8).collect();
        values.sort_unstable();
        // Zipf-like weights over a shuffled rank order.
        let exponent = rng.random_range(0.6..1.6);
        let mut ranks: Vec<usize> = (1..=k).collect();
        rand::seq::SliceRandom::shuffle(ranks.as_mut_slice(), rng);
        let w: Vec<f64> = ranks.iter().map(|&r| (r as f64).powf(-exponent)).collect();
        Palette { values, weights: WeightedIndex::new(w).expect("positive weights") }
    }

    fn byte(&self, rng: &mut ChaCha8Rng) -> u8 {
        self.values[self.weights.sample(rng)]
    }
}

/// Generates one file; deterministic in `seed`.
pub fn synth_file(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = Palette::sample(&mut rng);
    let templates: Vec<Vec<u8>> = (0..rng.random_range(2..=6))
        .map(|_| {
            let n = rng.random_range(16..=256);
            (0..n).map(|_| palette.byte(&mut rng)).collect()
        })
        .collect();
    // Per-file mixture over segment kinds.
    let mix = WeightedIndex::new((0..4).map(|_| rng.random_range(0.1..1.0))).expect("weights");
    let mut out = Vec::with_capacity(len + 4096);
    while out.len() < len {
        match mix.sample(&mut rng) {
            0 => {
                let t = &templates[rng.random_range(0..templates.len())];
                for _ in 0..rng.random_range(2..=32) {
                    out.extend_from_slice(t);
                }
            }
            1 => {
                let n = rng.random_range(128..=4096);
                out.extend((0..n).map(|_| palette.byte(&mut rng)));
            }
            2 => {
                let b = if rng.random_bool(0.5) { 0 } else { palette.byte(&mut rng) };
                let n = rng.random_range(16..=512);
                out.extend(std::iter::repeat_n(b, n));
            }
            _ => {
                let mut seg = vec![0u8; rng.random_range(64..=2048)];
                rng.fill_bytes(&mut seg);
                out.extend_from_slice(&seg);
            }
        }
    }
    out.truncate(len);
    out
}

pub fn synth_corpus(cfg: &SynthConfig) -> Vec<Vec<u8>> {
    let mut sizes = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5157));
    (0..cfg.files)
        .map(|i| {
            let len = sizes.random_range(cfg.min_len..=cfg.max_len);
            synth_file(len, derive_seed(cfg.seed, 0x1000 + i as u64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let cfg = SynthConfig { files: 20, ..SynthConfig::default() };
        let a = synth_corpus(&cfg);
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|f| (4096..=65536).contains(&f.len())));
        assert_eq!(a, synth_corpus(&cfg));
        assert_ne!(a[0], a[1]);
    }
}
