//! Perturbation-consistent minimax training.
//!
//! Every stage runs two rounds over a batch of `(x, x')` pairs. In round one
//! the generator embeds the clean rows and the adversary the perturbed rows;
//! in round two the networks swap both inputs and roles. Whichever network
//! sees the perturbed rows ascends the batch discrepancy, the other descends
//! it, and both update in every round.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DEFAULT_SHIFT, FEATURE_DIM, compute_uneva, extract_features, transform_counts};
use crate::kernel_net::{
    FeatureMapKind, ForwardCache, Mode, NetworkParams, ParamGrads, RandomFeatureBank, backward, forward_mapped,
    init_params, sample_feature_bank_with_bandwidth,
};
use crate::similarity::{Digest, mmd_batch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Probability of keeping a unit under dropout (drop rate 0.75 by default).
    pub keep_prob: f64,
    /// Number of random kernel features `s`.
    pub features: usize,
    /// Embedding (digest) size `E`.
    pub embedding: usize,
    pub rho_max: usize,
    pub master_seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub kind: FeatureMapKind,
    /// Kernel bandwidth of the feature map on log-damped counts.
    pub bandwidth: f64,
    pub shift_bits: u32,
    /// One bank for both networks; otherwise each samples its own.
    pub shared_bank: bool,
    /// Start both networks from the same parameters.
    pub shared_init: bool,
    /// Stop once the epoch mean discrepancy changes by less than 1e-4
    /// (relative) over 50 epochs.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1000,
            learning_rate: 5e-4,
            epochs: 5000,
            keep_prob: 0.25,
            features: 512,
            embedding: 512,
            rho_max: 500,
            master_seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            kind: FeatureMapKind::Fourier,
            bandwidth: DEFAULT_BANDWIDTH,
            shift_bits: DEFAULT_SHIFT,
            shared_bank: true,
            shared_init: true,
            early_stop: false,
        }
    }
}

/// Default kernel bandwidth for training, on the scale of the distance
/// between log-damped histograms of a file and a few-hundred-bit mutant.
pub const DEFAULT_BANDWIDTH: f64 = 16.0;

const EARLY_STOP_WINDOW: usize = 50;
const EARLY_STOP_TOL: f64 = 1e-4;

impl TrainConfig {
    /// Scaled-down preset that trains in minutes on a laptop.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 100,
            epochs: 200,
            features: 128,
            embedding: 128,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.rho_max < 1 {
            return bad("rho_max must be >= 1");
        }
        if self.features < 1 || self.embedding < 2 {
            return bad("need features >= 1 and embedding >= 2");
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad("keep_prob must be in (0, 1]");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return bad("bandwidth must be positive");
        }
        if !(1..=7).contains(&self.shift_bits) {
            return bad("shift_bits must be in 1..=7");
        }
        Ok(())
    }
}

/// Mean per-round discrepancy of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub delta_round1_mean: f64,
    pub delta_round2_mean: f64,
}

impl EpochStats {
    pub fn csv_header() -> &'static str {
        "epoch,delta_round1_mean,delta_round2_mean"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.epoch, self.delta_round1_mean, self.delta_round2_mean)
    }
}

/// Both players plus the frozen feature bank(s).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    /// One shared bank, or `[generator, adversary]`.
    pub banks: Vec<RandomFeatureBank>,
    pub generator: NetworkParams,
    pub adversary: NetworkParams,
    pub config: TrainConfig,
    pub loss_history: Vec<EpochStats>,
    /// Calibrated decision threshold on delta, when one was computed.
    pub tau_delta: Option<f64>,
}

impl TrainedModel {
    pub fn initialize(cfg: &TrainConfig) -> Result<TrainedModel> {
        cfg.validate()?;
        let seeds = SeedPlan::new(cfg.master_seed);
        let bank_g = sample_feature_bank_with_bandwidth(cfg.kind, cfg.features, FEATURE_DIM, seeds.bank_g, cfg.bandwidth);
        let banks = if cfg.shared_bank {
            vec![bank_g]
        } else {
            let bank_d =
                sample_feature_bank_with_bandwidth(cfg.kind, cfg.features, FEATURE_DIM, seeds.bank_d, cfg.bandwidth);
            vec![bank_g, bank_d]
        };
        let generator = init_params(&banks[0], cfg.embedding, seeds.init_g)?;
        let init_d = if cfg.shared_init { seeds.init_g } else { seeds.init_d };
        let adversary = init_params(banks.last().expect("bank"), cfg.embedding, init_d)?;
        Ok(TrainedModel {
            banks,
            generator,
            adversary,
            config: cfg.clone(),
            loss_history: Vec::new(),
            tau_delta: None,
        })
    }

    pub fn generator_bank(&self) -> &RandomFeatureBank {
        &self.banks[0]
    }

    pub fn adversary_bank(&self) -> &RandomFeatureBank {
        self.banks.last().expect("model has a bank")
    }

    pub fn embedding_size(&self) -> usize {
        self.generator.embedding_size()
    }

    /// Infer-mode embeddings of one file's transformed counts.
    pub fn embed_row(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let row = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Shape(e.to_string()))?;
        let mg = self.generator_bank().map_batch(row)?;
        let (hg, _) = forward_mapped(&self.generator, mg.view(), Mode::Infer)?;
        let (hd, _) = if self.config.shared_bank {
            forward_mapped(&self.adversary, mg.view(), Mode::Infer)?
        } else {
            let md = self.adversary_bank().map_batch(row)?;
            forward_mapped(&self.adversary, md.view(), Mode::Infer)?
        };
        Ok((hg.into_raw_vec_and_offset().0, hd.into_raw_vec_and_offset().0))
    }

    /// Fuzzy-hash digest of a file.
    pub fn digest(&self, bytes: &[u8]) -> Result<Digest> {
        let x = extract_features(bytes, self.config.shift_bits)?;
        let (hg, hd) = self.embed_row(&transform_counts(&x))?;
        Ok(Digest {
            h_g: hg.iter().map(|&v| v as f32).collect(),
            h_d: hd.iter().map(|&v| v as f32).collect(),
            uneva: compute_uneva(bytes)?,
            model_fingerprint: self.fingerprint(),
            file_length: bytes.len() as u64,
        })
    }

    /// Rounds parameters to `f32` so that the model equals its serialized form.
    pub fn finalize(&mut self) {
        self.generator.round_to_f32();
        self.adversary.round_to_f32();
    }
}

/// Seeds derived from the master seed, one per consumer.
#[derive(Clone, Copy, Debug)]
struct SeedPlan {
    bank_g: u64,
    bank_d: u64,
    init_g: u64,
    init_d: u64,
    shuffle: u64,
    dropout: u64,
}

/// Independent seed for `stream` under `master` (splitmix64 mixing).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedPlan {
    fn new(master: u64) -> Self {
        SeedPlan {
            bank_g: derive_seed(master, 1),
            bank_d: derive_seed(master, 2),
            init_g: derive_seed(master, 3),
            init_d: derive_seed(master, 4),
            shuffle: derive_seed(master, 5),
            dropout: derive_seed(master, 6),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    fn from_config(cfg: &TrainConfig) -> Self {
        AdamHyper {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// Bias-corrected Adam update; `ascend` follows the gradient instead of
/// opposing it.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    hyper: AdamHyper,
    ascend: bool,
) -> Result<()> {
    let shapes_ok = grads.gamma.len() == params.gamma.len()
        && grads.beta.len() == params.beta.len()
        && grads.w2.dim() == params.w2.dim()
        && grads.b2.len() == params.b2.len()
        && state.m.w2.dim() == params.w2.dim()
        && state.m.gamma.len() == params.gamma.len();
    if !shapes_ok {
        return Err(Error::Shape("gradient or optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let sign = if ascend { -1.0 } else { 1.0 };
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        let g = sign * g;
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
    };
    macro_rules! apply {
        ($field:ident) => {
            ndarray::Zip::from(&mut params.$field)
                .and(&grads.$field)
                .and(&mut state.m.$field)
                .and(&mut state.v.$field)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        };
    }
    apply!(gamma);
    apply!(beta);
    apply!(w2);
    apply!(b2);
    Ok(())
}

/// Gradient of `mmd_batch(a, b)` w.r.t. each row of `a`; the gradient w.r.t.
/// `b` is its negation.
fn mmd_grad(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let rows = a.nrows() as f64;
    let diff = a.mean_axis(Axis(0)).expect("rows") - b.mean_axis(Axis(0)).expect("rows");
    let row = diff * (2.0 / rows);
    row.broadcast(a.dim()).expect("broadcast").to_owned()
}

/// Mutable training state: model, optimizers and the dropout stream.
pub struct Trainer {
    model: TrainedModel,
    adam_g: AdamState,
    adam_d: AdamState,
    dropout_rng: ChaCha8Rng,
}

/// One network's view of a batch in a round.
struct RoundSide<'a> {
    rows: ArrayView2<'a, f64>,
}

impl Trainer {
    pub fn new(model: TrainedModel) -> Self {
        let seeds = SeedPlan::new(model.config.master_seed);
        Trainer {
            adam_g: AdamState::new(&model.generator),
            adam_d: AdamState::new(&model.adversary),
            dropout_rng: ChaCha8Rng::seed_from_u64(seeds.dropout),
            model,
        }
    }

    pub fn model(&self) -> &TrainedModel {
        &self.model
    }

    pub fn into_model(self) -> TrainedModel {
        self.model
    }

    fn train_mode(&mut self) -> Mode {
        Mode::Train {
            keep_prob: self.model.config.keep_prob,
            dropout_seed: self.dropout_rng.random(),
        }
    }

    /// One round: `descender` embeds the clean side, `ascender` the perturbed
    /// side. Returns the discrepancy measured before the update.
    fn round(&mut self, generator_descends: bool, clean: RoundSide<'_>, perturbed: RoundSide<'_>) -> Result<f64> {
        let hyper = AdamHyper::from_config(&self.model.config);
        let mode_clean = self.train_mode();
        let mode_pert = self.train_mode();
        let (desc_params, asc_params) = if generator_descends {
            (&self.model.generator, &self.model.adversary)
        } else {
            (&self.model.adversary, &self.model.generator)
        };
        let (h_clean, cache_clean) = forward_mapped(desc_params, clean.rows, mode_clean)?;
        let (h_pert, cache_pert) = forward_mapped(asc_params, perturbed.rows, mode_pert)?;
        let delta = mmd_batch(h_clean.view(), h_pert.view())?;
        if !delta.is_finite() {
            return Err(Error::Numerics("batch discrepancy".into()));
        }
        let g_clean = mmd_grad(&h_clean, &h_pert);
        let g_pert = -&g_clean;
        let grads_clean = backward(&cache_clean, desc_params, &g_clean)?;
        let grads_pert = backward(&cache_pert, asc_params, &g_pert)?;

        let (desc, desc_adam, asc, asc_adam) = if generator_descends {
            (&mut self.model.generator, &mut self.adam_g, &mut self.model.adversary, &mut self.adam_d)
        } else {
            (&mut self.model.adversary, &mut self.adam_d, &mut self.model.generator, &mut self.adam_g)
        };
        let backup = (desc.clone(), desc_adam.clone(), asc.clone(), asc_adam.clone());
        apply_side(desc, desc_adam, &grads_clean, &cache_clean, hyper, false)?;
        apply_side(asc, asc_adam, &grads_pert, &cache_pert, hyper, true)?;
        if !desc.is_finite() || !asc.is_finite() {
            (*desc, *desc_adam, *asc, *asc_adam) = backup;
            return Err(Error::Numerics("parameters after update".into()));
        }
        Ok(delta)
    }

    /// Runs both rounds on already-mapped kernel features.
    pub fn run_stage_mapped(
        &mut self,
        x_g: ArrayView2<'_, f64>,
        xp_g: ArrayView2<'_, f64>,
        x_d: ArrayView2<'_, f64>,
        xp_d: ArrayView2<'_, f64>,
    ) -> Result<(f64, f64)> {
        if x_g.dim() != xp_g.dim() || x_d.dim() != xp_d.dim() {
            return Err(Error::Shape("clean and perturbed batches differ in shape".into()));
        }
        if x_g.nrows() < 2 {
            return Err(Error::BatchTooSmall(x_g.nrows()));
        }
        // Round 1: G holds x (descends), D holds x' (ascends).
        let d1 = self.round(true, RoundSide { rows: x_g }, RoundSide { rows: xp_d })?;
        // Round 2: D holds x (descends), G holds x' (ascends).
        let d2 = self.round(false, RoundSide { rows: x_d }, RoundSide { rows: xp_g })?;
        Ok((d1, d2))
    }

    /// One stage on raw transformed-count rows (`B x 512`).
    pub fn run_stage(&mut self, x: ArrayView2<'_, f64>, xp: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
        let bank_g = self.model.generator_bank();
        let x_g = bank_g.map_batch(x)?;
        let xp_g = bank_g.map_batch(xp)?;
        if self.model.config.shared_bank {
            self.run_stage_mapped(x_g.view(), xp_g.view(), x_g.view(), xp_g.view())
        } else {
            let bank_d = self.model.adversary_bank();
            let x_d = bank_d.map_batch(x)?;
            let xp_d = bank_d.map_batch(xp)?;
            self.run_stage_mapped(x_g.view(), xp_g.view(), x_d.view(), xp_d.view())
        }
    }
}

fn apply_side(
    params: &mut NetworkParams,
    adam: &mut AdamState,
    grads: &ParamGrads,
    cache: &ForwardCache,
    hyper: AdamHyper,
    ascend: bool,
) -> Result<()> {
    adam_step(params, grads, adam, hyper, ascend)?;
    params.absorb_batch_stats(cache);
    Ok(())
}

/// Transformed-count matrices for the clean and perturbed side of each pair.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub clean: Array2<f64>,
    pub perturbed: Array2<f64>,
}

impl PairFeatures {
    pub fn from_pairs<A: AsRef<[u8]>, B: AsRef<[u8]>>(pairs: &[(A, B)], shift_bits: u32) -> Result<Self> {
        let n = pairs.len();
        let mut clean = Array2::zeros((n, FEATURE_DIM));
        let mut perturbed = Array2::zeros((n, FEATURE_DIM));
        for (i, (a, b)) in pairs.iter().enumerate() {
            let za = transform_counts(&extract_features(a.as_ref(), shift_bits)?);
            let zb = transform_counts(&extract_features(b.as_ref(), shift_bits)?);
            clean.row_mut(i).assign(&ndarray::ArrayView1::from(&za));
            perturbed.row_mut(i).assign(&ndarray::ArrayView1::from(&zb));
        }
        Ok(PairFeatures { clean, perturbed })
    }

    pub fn len(&self) -> usize {
        self.clean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn train<A: AsRef<[u8]>, B: AsRef<[u8]>>(
    pairs: &[(A, B)],
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainedModel> {
    cfg.validate()?;
    let features = PairFeatures::from_pairs(pairs, cfg.shift_bits)?;
    train_features(&features, cfg, progress)
}

pub fn train_features(
    data: &PairFeatures,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainedModel> {
    train_features_checkpointed(data, cfg, progress, 0, &mut |_, _| Ok(()))
}

/// Like [`train_features`], handing a finalized snapshot of the model to
/// `checkpoint` after every `every` epochs (never when `every` is 0).
pub fn train_features_checkpointed(
    data: &PairFeatures,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
    every: usize,
    checkpoint: &mut dyn FnMut(usize, &TrainedModel) -> Result<()>,
) -> Result<TrainedModel> {
    let mut model = TrainedModel::initialize(cfg)?;
    if cfg.epochs == 0 {
        model.finalize();
        return Ok(model);
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} training pairs; need at least 2")));
    }
    let batch = if n < cfg.batch_size {
        log::warn!("only {n} training pairs; shrinking batch size from {} to {n}", cfg.batch_size);
        n
    } else {
        cfg.batch_size
    };

    let map = |bank: &RandomFeatureBank| -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((bank.map_batch(data.clean.view())?, bank.map_batch(data.perturbed.view())?))
    };
    let (x_g, xp_g) = map(model.generator_bank())?;
    let mapped_d = if cfg.shared_bank { None } else { Some(map(model.adversary_bank())?) };
    let (x_d, xp_d) = mapped_d.as_ref().map_or((&x_g, &xp_g), |(a, b)| (a, b));

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(SeedPlan::new(cfg.master_seed).shuffle);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trainer = Trainer::new(model);
    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum1, mut sum2, mut stages) = (0.0, 0.0, 0usize);
        // The trailing partial batch is dropped.
        for idx in order.chunks_exact(batch) {
            let (d1, d2) = trainer.run_stage_mapped(
                x_g.select(Axis(0), idx).view(),
                xp_g.select(Axis(0), idx).view(),
                x_d.select(Axis(0), idx).view(),
                xp_d.select(Axis(0), idx).view(),
            )?;
            sum1 += d1;
            sum2 += d2;
            stages += 1;
        }
        let stats = EpochStats {
            epoch,
            delta_round1_mean: sum1 / stages as f64,
            delta_round2_mean: sum2 / stages as f64,
        };
        progress(&stats);
        history.push(stats);
        if every > 0 && (epoch + 1) % every == 0 {
            let mut snap = trainer.model().clone();
            snap.loss_history = history.clone();
            snap.finalize();
            checkpoint(epoch + 1, &snap)?;
        }
        if cfg.early_stop && converged(&history) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let mut model = trainer.into_model();
    model.loss_history = history;
    model.finalize();
    Ok(model)
}

fn converged(history: &[EpochStats]) -> bool {
    if history.len() <= EARLY_STOP_WINDOW {
        return false;
    }
    let mean = |s: &EpochStats| 0.5 * (s.delta_round1_mean + s.delta_round2_mean);
    let now = mean(&history[history.len() - 1]);
    let then = mean(&history[history.len() - 1 - EARLY_STOP_WINDOW]);
    (now - then).abs() <= EARLY_STOP_TOL * then.abs().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_net::{Mode, forward_mapped, sample_feature_bank};

    fn toy_params() -> NetworkParams {
        let bank = sample_feature_bank(FeatureMapKind::Fourier, 6, 3, 1);
        init_params(&bank, 3, 2).unwrap()
    }

    fn grads_filled(p: &NetworkParams, f: impl Fn(usize) -> f64) -> ParamGrads {
        let mut g = ParamGrads::zeros_like(p);
        let all = g.gamma.iter_mut().chain(g.beta.iter_mut()).chain(g.w2.iter_mut()).chain(g.b2.iter_mut());
        for (i, v) in all.enumerate() {
            *v = f(i);
        }
        g
    }

    const HYPER: AdamHyper = AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    #[test]
    fn adam_zero_grads_advance_step_only() {
        let mut p = toy_params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let z = ParamGrads::zeros_like(&p);
        adam_step(&mut p, &z, &mut st, HYPER, false).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = toy_params();
        let before = p.clone();
        let g = grads_filled(&p, |i| if i % 2 == 0 { 0.3 + i as f64 } else { -0.7 - i as f64 });
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, HYPER, false).unwrap();
        for ((a, b), gv) in p.w2.iter().zip(before.w2.iter()).zip(g.w2.iter()) {
            assert!(((b - a) - HYPER.lr * gv.signum()).abs() < 1e-9);
        }
        for ((a, b), gv) in p.gamma.iter().zip(before.gamma.iter()).zip(g.gamma.iter()) {
            assert!(((b - a) - HYPER.lr * gv.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn ascend_equals_descend_on_negated() {
        let p0 = toy_params();
        let g = grads_filled(&p0, |i| (i as f64 * 0.37).sin());
        let neg = grads_filled(&p0, |i| -(i as f64 * 0.37).sin());
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let (mut sa, mut sb) = (AdamState::new(&p0), AdamState::new(&p0));
        for _ in 0..3 {
            adam_step(&mut a, &g, &mut sa, HYPER, true).unwrap();
            adam_step(&mut b, &neg, &mut sb, HYPER, false).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = toy_params();
        let bank = sample_feature_bank(FeatureMapKind::Fourier, 5, 3, 1);
        let other = init_params(&bank, 3, 2).unwrap();
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &ParamGrads::zeros_like(&other), &mut st, HYPER, false),
            Err(Error::Shape(_))
        ));
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            features: 16,
            embedding: 4,
            ..TrainConfig::default()
        }
    }

    fn toy_rows(seed: u64, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, FEATURE_DIM), || rng.random_range(0.0..4.0))
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let cfg = TrainConfig { learning_rate: 0.0, ..toy_config() };
        let model = TrainedModel::initialize(&cfg).unwrap();
        let mut t = Trainer::new(model.clone());
        let x = toy_rows(1, 4);
        let xp = toy_rows(2, 4);
        let (d1, d2) = t.run_stage(x.view(), xp.view()).unwrap();
        assert!(d1.is_finite() && d2.is_finite());
        let after = t.model();
        for (a, b) in [(&after.generator, &model.generator), (&after.adversary, &model.adversary)] {
            assert_eq!(a.w2, b.w2);
            assert_eq!(a.b2, b.b2);
            assert_eq!(a.gamma, b.gamma);
            assert_eq!(a.beta, b.beta);
        }
    }

    #[test]
    fn identical_inputs_without_dropout_give_equal_rounds() {
        let cfg = TrainConfig { keep_prob: 1.0, learning_rate: 0.0, ..toy_config() };
        let mut t = Trainer::new(TrainedModel::initialize(&cfg).unwrap());
        let x = toy_rows(3, 4);
        let (d1, d2) = t.run_stage(x.view(), x.view()).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1, 0.0);
    }

    #[test]
    fn generator_step_reduces_discrepancy() {
        let cfg = TrainConfig { learning_rate: 1e-5, keep_prob: 1.0, ..toy_config() };
        let model = TrainedModel::initialize(&cfg).unwrap();
        let bank = model.generator_bank().clone();
        let ux = bank.map_batch(toy_rows(5, 4).view()).unwrap();
        let uxp = bank.map_batch(toy_rows(6, 4).view()).unwrap();
        let mode = Mode::Train { keep_prob: 1.0, dropout_seed: 0 };
        let loss = |g: &NetworkParams| {
            let (a, _) = forward_mapped(g, ux.view(), mode).unwrap();
            let (b, _) = forward_mapped(&model.adversary, uxp.view(), mode).unwrap();
            mmd_batch(a.view(), b.view()).unwrap()
        };
        let before = loss(&model.generator);
        let (ha, cache) = forward_mapped(&model.generator, ux.view(), mode).unwrap();
        let (hb, _) = forward_mapped(&model.adversary, uxp.view(), mode).unwrap();
        let grads = backward(&cache, &model.generator, &mmd_grad(&ha, &hb)).unwrap();
        let mut g = model.generator.clone();
        let mut st = AdamState::new(&g);
        adam_step(&mut g, &grads, &mut st, AdamHyper::from_config(&cfg), false).unwrap();
        assert!(loss(&g) <= before, "{} > {before}", loss(&g));
    }

    #[test]
    fn epochs_zero_returns_initialized_model() {
        let cfg = TrainConfig { epochs: 0, ..toy_config() };
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = vec![];
        let m = train(&pairs, &cfg, &mut |_| {}).unwrap();
        assert_eq!(m, TrainedModel::initialize(&cfg).unwrap());
    }

    #[test]
    fn tiny_corpus_is_rejected_and_small_batch_shrinks() {
        let cfg = toy_config();
        let one = vec![(vec![1u8, 2, 3], vec![1u8, 2, 2])];
        assert!(matches!(train(&one, &cfg, &mut |_| {}), Err(Error::InsufficientData(_))));
        let three: Vec<_> = (0..3u8).map(|i| (vec![i, 1, 2], vec![i, 1, 3])).collect();
        let mut epochs = 0;
        train(&three, &cfg, &mut |_| epochs += 1).unwrap();
        assert_eq!(epochs, 2);
    }

    #[test]
    fn training_is_deterministic_and_keeps_bank() {
        let cfg = TrainConfig { epochs: 3, ..toy_config() };
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..10u8)
            .map(|i| {
                let a: Vec<u8> = (0..200u32).map(|j| ((j * (i as u32 + 3)) % 251) as u8).collect();
                let mut b = a.clone();
                b[7] ^= 1;
                (a, b)
            })
            .collect();
        let mut log = Vec::new();
        let a = train(&pairs, &cfg, &mut |s| log.push(*s)).unwrap();
        let b = train(&pairs, &cfg, &mut |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.banks, TrainedModel::initialize(&cfg).unwrap().banks);
        assert_eq!(log.len(), 3);
        for s in &log {
            assert!((0.0..=2.0).contains(&s.delta_round1_mean));
            assert!((0.0..=2.0).contains(&s.delta_round2_mean));
        }
    }

    #[test]
    fn separate_banks_train() {
        let cfg = TrainConfig { shared_bank: false, shared_init: false, ..toy_config() };
        let pairs: Vec<_> = (0..8u8).map(|i| (vec![i; 50], vec![i ^ 1; 50])).collect();
        let m = train(&pairs, &cfg, &mut |_| {}).unwrap();
        assert_eq!(m.banks.len(), 2);
        assert_ne!(m.banks[0], m.banks[1]);
    }

    #[test]
    fn early_stop_detects_flat_history() {
        let flat: Vec<_> = (0..60)
            .map(|epoch| EpochStats { epoch, delta_round1_mean: 0.5, delta_round2_mean: 0.5 })
            .collect();
        assert!(converged(&flat));
        assert!(!converged(&flat[..40]));
    }
}
