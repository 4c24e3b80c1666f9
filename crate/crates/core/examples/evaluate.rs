//! Detection and rejection rates of the learned digest and the baseline on
//! a held-out synthetic corpus, plus a bit-substitution robustness curve.

use akash::eval::{self, AkashHasher, EvalPlan, SahashHasher, Scenario};
use akash::perturb::make_training_pairs;
use akash::similarity::ThresholdConfig;
use akash::synth::{synth_corpus, SynthConfig};
use akash::trainer::{train, TrainConfig};

fn main() -> akash::Result<()> {
    let corpus = synth_corpus(&SynthConfig { files: 200, seed: 1, ..Default::default() });
    let (train_set, held) = corpus.split_at(100);
    let tp = make_training_pairs(train_set, 500, 2)?;
    let pairs: Vec<(&[u8], &[u8])> = tp.pairs.iter().map(|p| (p.original.as_slice(), p.perturbed.as_slice())).collect();
    let model = train(&pairs, &TrainConfig { epochs: 40, ..TrainConfig::desk() }, &mut |_| {})?;

    let held: Vec<&[u8]> = held.iter().map(Vec::as_slice).collect();
    let names: Vec<String> = (0..held.len()).map(|i| format!("held_{i}")).collect();
    let plan = EvalPlan { scenarios: Scenario::ALL.to_vec(), distinct_pairs: 2000, ..EvalPlan::default() };
    let (cases, _) = eval::build_cases(&held, &plan)?;
    let distinct = eval::sample_distinct_pairs(held.len(), plan.distinct_pairs, 5)?;

    let t = ThresholdConfig::default();
    let (ak, _) = eval::evaluate(&AkashHasher { model: &model, thresholds: t }, &names, &held, &cases, &distinct)?;
    let (sa, _) = eval::evaluate(&SahashHasher::new(t), &names, &held, &cases, &distinct)?;
    for r in [&ak, &sa] {
        println!("{}: rejects {:.3} of distinct pairs", r.hasher, r.distinct_rejection_rate);
        for c in &r.perturbed {
            println!("    {:<13} {:.3}", c.class, c.detection_rate);
        }
    }

    let curve = eval::robustness_curve(&AkashHasher { model: &model, thresholds: t }, held[0], &[10, 100, 1000], 5, 1)?;
    for p in curve {
        println!("rho {:5}  mean delta {:.4}", p.magnitude, p.mean);
    }
    Ok(())
}
