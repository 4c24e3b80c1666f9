//! How well a random Fourier bank approximates the Gaussian kernel as the
//! number of features grows.

use akash::kernel_net::{feature_map, sample_feature_bank, FeatureMapKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> akash::Result<()> {
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..200)
        .map(|_| {
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            (a, b)
        })
        .collect();
    for s in [16, 64, 256, 1024, 4096] {
        let bank = sample_feature_bank(FeatureMapKind::Fourier, s, d, 11);
        let mut worst = 0.0f64;
        for (a, b) in &pairs {
            let (pa, pb) = (feature_map(a, &bank)?, feature_map(b, &bank)?);
            let approx: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            worst = worst.max((approx - (-sq / 2.0).exp()).abs());
        }
        println!("s = {s:5}  worst error {worst:.4}");
    }
    Ok(())
}
