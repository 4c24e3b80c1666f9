//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the terminal; exits nonzero if any
//! criterion fails.

use std::time::{Duration, Instant};

use akash::eval::{self, AkashHasher, EvalPlan, PairScore, SahashHasher, Scenario};
use akash::features::{extract_features, DEFAULT_SHIFT, UnevaVector};
use akash::kernel_net::{
    backward, feature_map, forward, init_params, sample_feature_bank, FeatureMapKind, Mode, NetworkParams,
};
use akash::perturb::{
    apply_edit, hamming_distance, make_training_pairs, substitute_bits, PerturbKind, PerturbSpec, ProtectedRegions,
};
use akash::sahash::{sahash_digest, sahash_distance, sahash_modulus};
use akash::similarity::{
    deserialize_model, directed_distance, mmd_batch, pair_score, serialize_model, Digest, DigestEncoding,
    ThresholdConfig,
};
use akash::stats::{auc_lower_is_positive, mann_whitney_less, spearman};
use akash::synth::{synth_corpus, SynthConfig};
use akash::trainer::{train, TrainConfig, TrainedModel};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

fn loss(p: &NetworkParams, bank: &akash::kernel_net::RandomFeatureBank, x: &Array2<f64>, y: &Array2<f64>, mode: Mode) -> f64 {
    let (h, _) = forward(p, bank, x.view(), mode).unwrap();
    mmd_batch(h.view(), y.view()).unwrap()
}

fn rel_err(fd: &[f64], an: &[f64]) -> f64 {
    let diff: f64 = fd.iter().zip(an).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt() + an.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-12 {
        0.0
    } else {
        diff / norm
    }
}

fn gradient_fd() -> Outcome {
    let start = Instant::now();
    let (d, s, e, b) = (8, 16, 4, 4);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for cfg in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg);
        let bank = sample_feature_bank(FeatureMapKind::Fourier, s, d, cfg);
        let mut p = init_params(&bank, e, cfg + 100).unwrap();
        p.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        p.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        p.b2.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = Array2::from_shape_simple_fn((b, d), || rng.random_range(0.0..3.0));
        let y = Array2::from_shape_simple_fn((b, e), || rng.random_range(0.0..0.5));
        let keep_prob = [1.0, 0.75, 0.5][cfg as usize % 3];
        let mode = Mode::Train { keep_prob, dropout_seed: cfg };

        let (hx, cache) = forward(&p, &bank, x.view(), mode).unwrap();
        let diff = hx.mean_axis(Axis(0)).unwrap() - y.mean_axis(Axis(0)).unwrap();
        let g_emb = Array2::from_shape_fn((b, e), |(_, j)| 2.0 * diff[j] / b as f64);
        let an = backward(&cache, &p, &g_emb).unwrap();

        macro_rules! fd_for {
            ($field:ident, $grad:expr) => {{
                let n = p.$field.len();
                let mut fd = Vec::with_capacity(n);
                for i in 0..n {
                    let mut plus = p.clone();
                    let mut minus = p.clone();
                    *plus.$field.iter_mut().nth(i).unwrap() += h;
                    *minus.$field.iter_mut().nth(i).unwrap() -= h;
                    fd.push((loss(&plus, &bank, &x, &y, mode) - loss(&minus, &bank, &x, &y, mode)) / (2.0 * h));
                }
                let an: Vec<f64> = $grad.iter().copied().collect();
                worst = worst.max(rel_err(&fd, &an));
            }};
        }
        fd_for!(gamma, an.gamma);
        fd_for!(beta, an.beta);
        fd_for!(w2, an.w2);
        fd_for!(b2, an.b2);
    }
    let t = start.elapsed();
    check(worst <= 1e-3 && t < Duration::from_secs(10), format!("24 configs, worst relative error {worst:.2e}, {t:.2?}"))
}

// ------------------------------------------------------------------- kernel

fn kernel_approximation() -> Outcome {
    let start = Instant::now();
    let d = 16;
    let bank = sample_feature_bank(FeatureMapKind::Fourier, 4096, d, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = rng.random_range(0.0..=2.0);
        let z2: Vec<f64> = z.iter().zip(&dir).map(|(a, u)| a + r * u / norm).collect();
        let (a, b) = (feature_map(&z, &bank).unwrap(), feature_map(&z2, &bank).unwrap());
        let approx: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        worst = worst.max((approx - (-r * r / 2.0).exp()).abs());
    }
    let t = start.elapsed();
    check(worst <= 0.05 && t < Duration::from_secs(30), format!("s=4096, 100 pairs, worst error {worst:.4}, {t:.2?}"))
}

fn mmd_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (rows, cols) = (rng.random_range(1..20), rng.random_range(1..16));
        let a = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-3.0..3.0));
        let b = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-3.0..3.0));
        let mut brute = 0.0;
        for j in 0..cols {
            let (mut sa, mut sb) = (0.0, 0.0);
            for i in 0..rows {
                sa += a[[i, j]];
                sb += b[[i, j]];
            }
            let diff = sa / rows as f64 - sb / rows as f64;
            brute += diff * diff;
        }
        worst = worst.max((mmd_batch(a.view(), b.view()).unwrap() - brute).abs());
    }
    check(worst <= 1e-9, format!("100 batches, worst difference {worst:.2e}"))
}

fn score_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let digest = |rng: &mut ChaCha8Rng| {
        let e = 16;
        let mut runs = [0u32; 256];
        runs.iter_mut().for_each(|r| *r = rng.random_range(0..200));
        Digest {
            h_g: (0..e).map(|_| rng.random::<f32>()).collect(),
            h_d: (0..e).map(|_| rng.random::<f32>()).collect(),
            uneva: UnevaVector { runs },
            model_fingerprint: [7; 8],
            file_length: rng.random_range(1..1 << 20),
        }
    };
    let t = ThresholdConfig::default();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (a, b) = (digest(&mut rng), digest(&mut rng));
        if pair_score(&a, &b, &t).unwrap() != pair_score(&b, &a, &t).unwrap() {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("1000 pairs, {mismatches} asymmetric"))
}

// ------------------------------------------------------------- perturbation

fn perturbation_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut bad = Vec::new();
    for trial in 0..1000u64 {
        let len = rng.random_range(64..4096);
        let f: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let ranges: Vec<(usize, usize)> = (0..rng.random_range(0..4))
            .map(|_| {
                let a = rng.random_range(0..len);
                (a, (a + rng.random_range(1..len / 4)).min(len))
            })
            .collect();
        let regions = ProtectedRegions::new(ranges, len);
        let mutable_bits = 8 * (len - regions.protected_len());
        let rho = rng.random_range(1..=mutable_bits.min(1000));
        let m = substitute_bits(&f, rho, &regions, trial).unwrap();
        if hamming_distance(&f, &m) != rho as u64 {
            bad.push(format!("trial {trial}: popcount"));
        }
        if regions.ranges().iter().any(|&(a, b)| f[a..b] != m[a..b]) {
            bad.push(format!("trial {trial}: protected bytes changed"));
        }

        let kind = match trial % 4 {
            0 => PerturbKind::InsertBytes { offset: rng.random_range(0..=len), payload: vec![0xAB; rng.random_range(1..64)] },
            1 => {
                let offset = rng.random_range(0..len);
                PerturbKind::DeleteBytes { offset, len: rng.random_range(1..=len - offset) }
            }
            2 => PerturbKind::AppendOverlay { len: rng.random_range(1..512) },
            _ => PerturbKind::TruncateOverlay { len: rng.random_range(1..len) },
        };
        let spec = PerturbSpec { kind, seed: trial };
        let e = apply_edit(&f, &spec).unwrap();
        if e.len() as i64 != len as i64 + spec.size_delta() {
            bad.push(format!("trial {trial}: {spec} length"));
        }
    }
    check(bad.is_empty(), format!("1000 trials, {} violations {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>()))
}

// ------------------------------------------------------------------- sahash

fn modulus_oracle(l: u64) -> u64 {
    // smallest e with 4^e >= l, floored at 8
    let mut e = 0u32;
    while 4u128.pow(e) < u128::from(l) {
        e += 1;
    }
    1 << e.max(8)
}

fn sahash_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut violations = 0;
    for _ in 0..1000 {
        let len = rng.random_range(16..=4096);
        let f: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let k = rng.random_range(1..=8usize);
        let mut m = f.clone();
        for idx in rand::seq::index::sample(&mut rng, len, k) {
            m[idx] = m[idx].wrapping_add(rng.random_range(1..=255));
        }
        let da = sahash_digest(&extract_features(&f, DEFAULT_SHIFT).unwrap()).unwrap();
        let db = sahash_digest(&extract_features(&m, DEFAULT_SHIFT).unwrap()).unwrap();
        if sahash_distance(&da, &db).unwrap() > 2 * k as u64 {
            violations += 1;
        }
    }
    let lengths = [1u64, 255, 256, 65536, 1 << 20, 1 << 30];
    let wrong: Vec<u64> = lengths.iter().copied().filter(|&l| sahash_modulus(l).unwrap() != modulus_oracle(l)).collect();
    check(
        violations == 0 && wrong.is_empty(),
        format!("1000 trials, {violations} above 2k; modulus mismatches at {wrong:?}"),
    )
}

// ---------------------------------------------------------- trained model

struct Trained {
    model: TrainedModel,
    held: Vec<Vec<u8>>,
    /// (original, bit-substitution mutant) pairs on held-out files.
    positives: Vec<(Vec<u8>, Vec<u8>)>,
    distinct: Vec<(usize, usize)>,
    elapsed: Duration,
}

fn trained() -> Trained {
    let corpus = synth_corpus(&SynthConfig { files: 500, seed: 1, ..Default::default() });
    let (train_set, held) = corpus.split_at(250);
    let tp = make_training_pairs(train_set, 500, 7).unwrap();
    let pairs: Vec<(&[u8], &[u8])> = tp.pairs.iter().map(|p| (p.original.as_slice(), p.perturbed.as_slice())).collect();
    let start = Instant::now();
    let model = train(&pairs, &TrainConfig::desk(), &mut |_| {}).unwrap();
    let elapsed = start.elapsed();
    let mut positives = Vec::new();
    for rep in 0..5 {
        let hp = make_training_pairs(held, 500, 99 + rep).unwrap();
        positives.extend(hp.pairs.into_iter().map(|p| (p.original, p.perturbed)));
    }
    let distinct = eval::sample_distinct_pairs(held.len(), 4950, 3).unwrap();
    Trained { model, held: held.to_vec(), positives, distinct, elapsed }
}

fn distances(s: Vec<PairScore>) -> Vec<f64> {
    s.into_iter().map(|s| s.distance).collect()
}

fn rate(v: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    v.iter().filter(|&&d| pass(d)).count() as f64 / v.len() as f64
}

fn desk_training(t: &Trained) -> Outcome {
    // Uneva gate disabled: the comparison is on the digest distance alone.
    let open = ThresholdConfig { tau_delta: f64::INFINITY, tau_digest: u32::MAX, tau_uneva: u32::MAX };
    let ak = AkashHasher { model: &t.model, thresholds: open };
    let sa = SahashHasher::new(open);
    let neg: Vec<(&[u8], &[u8])> = t.distinct.iter().map(|&(i, j)| (t.held[i].as_slice(), t.held[j].as_slice())).collect();
    let (ap, an) = (distances(eval::score_pairs(&ak, &t.positives).unwrap()), distances(eval::score_pairs(&ak, &neg).unwrap()));
    let (sp, sn) = (distances(eval::score_pairs(&sa, &t.positives).unwrap()), distances(eval::score_pairs(&sa, &neg).unwrap()));
    let auc = auc_lower_is_positive(&ap, &an);

    let sn_int: Vec<u64> = sn.iter().map(|&d| if d.is_finite() { d as u64 } else { u64::MAX }).collect();
    let s_tau = eval::calibrate_integer(&sn_int, 0.01).unwrap().unwrap_or(0) as f64;
    let s_rej = rate(&sn, |d| d > s_tau);
    let s_det = rate(&sp, |d| d <= s_tau);
    let a_tau = akash::similarity::calibrate_from_scores(&ap, &an, 1.0 - s_rej).unwrap();
    let a_rej = rate(&an, |d| d > a_tau);
    let a_det = rate(&ap, |d| d <= a_tau);
    check(
        auc >= 0.85 && a_rej >= s_rej && a_det >= s_det,
        format!(
            "AUC {auc:.4}; rejection akash {a_rej:.4} / sahash {s_rej:.4}; detection akash {a_det:.4} / sahash {s_det:.4}; trained in {:.1?}",
            t.elapsed
        ),
    )
}

fn edit_generalization(t: &Trained) -> Outcome {
    let open = ThresholdConfig { tau_delta: f64::INFINITY, tau_digest: u32::MAX, tau_uneva: u32::MAX };
    let ak = AkashHasher { model: &t.model, thresholds: open };
    let held: Vec<&[u8]> = t.held.iter().map(Vec::as_slice).collect();
    let plan = EvalPlan {
        scenarios: vec![Scenario::Insert, Scenario::Delete, Scenario::Overlay],
        edit_fraction: 0.01,
        seed: 11,
        ..EvalPlan::default()
    };
    let (cases, _) = eval::build_cases(&held, &plan).unwrap();
    let pos: Vec<(&[u8], &[u8])> = cases.iter().map(|c| (held[c.file], c.mutant.as_slice())).collect();
    let neg: Vec<(&[u8], &[u8])> = t.distinct.iter().map(|&(i, j)| (held[i], held[j])).collect();
    let (x, y) = (distances(eval::score_pairs(&ak, &pos).unwrap()), distances(eval::score_pairs(&ak, &neg).unwrap()));
    let mw = mann_whitney_less(&x, &y);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    check(
        mw.p_less < 0.01 && mean(&x) < mean(&y),
        format!("{} edit pairs mean {:.4} vs distinct mean {:.4}, p = {:.2e}", x.len(), mean(&x), mean(&y), mw.p_less),
    )
}

fn curve_trend(t: &Trained) -> Outcome {
    let ak = AkashHasher { model: &t.model, thresholds: ThresholdConfig::default() };
    let grid = [10, 50, 100, 250, 500, 1000];
    let curves: Vec<_> = t.held[..20].iter().enumerate().map(|(i, f)| eval::robustness_curve(&ak, f, &grid, 5, i as u64).unwrap()).collect();
    let merged = eval::merge_curves(&curves);
    let xs: Vec<f64> = merged.iter().map(|p| p.magnitude as f64).collect();
    let ys: Vec<f64> = merged.iter().map(|p| p.mean).collect();
    let rho = spearman(&xs, &ys);
    let means: Vec<String> = ys.iter().map(|y| format!("{y:.4}")).collect();
    check(rho >= 0.8, format!("Spearman {rho:.3}, means [{}]", means.join(", ")))
}

fn learned_symmetry(t: &Trained) -> Outcome {
    let mut total = 0.0;
    for (a, b) in &t.positives {
        let (da, db) = (t.model.digest(a).unwrap(), t.model.digest(b).unwrap());
        let (x, y) = (directed_distance(&da, &db), directed_distance(&db, &da));
        if x + y > 0.0 {
            total += (x - y).abs() / (0.5 * (x + y));
        }
    }
    let mean = total / t.positives.len() as f64;
    check(mean < 0.25, format!("{} held-out pairs, mean relative difference {mean:.4}", t.positives.len()))
}

// ---------------------------------------------------------- reproducibility

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let c = corpus.to_string_lossy().into_owned();
    let (out_a, out_b) = (p("a.akm"), p("b.akm"));
    let runs = [
        vec!["akash", "-q", "synth", "--out", &c, "--files", "40", "--max-len", "16384", "--seed", "4"],
        vec!["akash", "-q", "train", "--corpus", &c, "--out", &out_a, "--epochs", "30", "--calibrate-fp", "0.01"],
        vec!["akash", "-q", "train", "--corpus", &c, "--out", &out_b, "--epochs", "30", "--calibrate-fp", "0.01"],
    ];
    for args in &runs {
        let code = akash::cli::run(args);
        if code != 0 {
            return Err(format!("{:?} exited with {code}", &args[..3]));
        }
    }
    let (a, b) = (std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
    let model = deserialize_model(&a).unwrap();
    let reserialized = serialize_model(&model);
    let d = model.digest(&std::fs::read(corpus.join("synth_0000.bin")).unwrap()).unwrap();
    let digest_ok = Digest::decode(&d.encode(DigestEncoding::Float32)).unwrap() == d
        && Digest::from_text(&d.to_text(DigestEncoding::Float32)).unwrap() == d;
    check(
        a == b && reserialized == a && digest_ok,
        format!(
            "model files {} ({} bytes); re-serialization {}; digest round trip {}",
            if a == b { "identical" } else { "differ" },
            a.len(),
            if reserialized == a { "bit-exact" } else { "differs" },
            if digest_ok { "bit-exact" } else { "differs" }
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    };
    report("gradient correctness", gradient_fd());
    report("kernel approximation", kernel_approximation());
    report("mmd oracle", mmd_oracle());
    report("exact score symmetry", score_symmetry());
    report("perturbation contracts", perturbation_contracts());
    report("sahash bound and modulus", sahash_bounds());
    report("reproducibility", reproducibility());
    let t = trained();
    report("desk-scale training", desk_training(&t));
    report("edit generalization", edit_generalization(&t));
    report("robustness-curve trend", curve_trend(&t));
    report("learned symmetry", learned_symmetry(&t));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
