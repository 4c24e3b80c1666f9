//! Trains a small model on a synthetic corpus, saves it, and compares a
//! held-out file against a mutant and against an unrelated file.

use akash::perturb::{make_training_pairs, substitute_bits, ProtectedRegions};
use akash::similarity::{deserialize_model, pair_score, serialize_model, DigestEncoding, ThresholdConfig};
use akash::synth::{synth_corpus, SynthConfig};
use akash::trainer::{train, TrainConfig};

fn main() -> akash::Result<()> {
    let corpus = synth_corpus(&SynthConfig { files: 120, seed: 1, ..Default::default() });
    let (train_set, held) = corpus.split_at(100);
    let tp = make_training_pairs(train_set, 500, 2)?;
    let pairs: Vec<(&[u8], &[u8])> = tp.pairs.iter().map(|p| (p.original.as_slice(), p.perturbed.as_slice())).collect();

    let cfg = TrainConfig { epochs: 40, ..TrainConfig::desk() };
    let model = train(&pairs, &cfg, &mut |s| {
        if s.epoch % 10 == 0 {
            println!("epoch {:3}  mmd {:.5}", s.epoch, s.delta_round2_mean);
        }
    })?;

    let path = std::env::temp_dir().join("akash_example.akm");
    std::fs::write(&path, serialize_model(&model))?;
    let model = deserialize_model(&std::fs::read(&path)?)?;

    let a = &held[0];
    let mutant = substitute_bits(a, 200, &ProtectedRegions::none(), 3)?;
    let (da, dm, db) = (model.digest(a)?, model.digest(&mutant)?, model.digest(&held[1])?);
    println!("digest {}...", &da.to_text(DigestEncoding::Quantized8)[..40]);
    let t = ThresholdConfig::default();
    println!("mutant:    {:?}", pair_score(&da, &dm, &t)?);
    println!("unrelated: {:?}", pair_score(&da, &db, &t)?);
    Ok(())
}
