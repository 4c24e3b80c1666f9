//! One player network: frozen random kernel features, batch normalization,
//! dropout, a dense layer and a softmax embedding, with hand-written forward
//! and backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
/// Upper bound on the exponent of the Laplace feature maps.
pub const LAPLACE_EXP_CLAMP: f64 = 30.0;
/// Stability index of the one-sided stable (Levy) weight sampler.
pub const LEVY_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMapKind {
    /// `sqrt(2/s) cos(w.z + b)`, w ~ N(0, I / bandwidth^2), b ~ U[0, 2pi).
    Fourier,
    /// `exp(-w.z) / s`, w ~ Exponential(1).
    LaplaceExponential,
    /// `exp(-w.z) / s`, w ~ one-sided stable with alpha = 1/2.
    LaplaceLevy,
}

impl FeatureMapKind {
    pub(crate) fn tag(self) -> u8 {
        match self {
            FeatureMapKind::Fourier => 0,
            FeatureMapKind::LaplaceExponential => 1,
            FeatureMapKind::LaplaceLevy => 2,
        }
    }
}

impl std::str::FromStr for FeatureMapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fourier" => Ok(FeatureMapKind::Fourier),
            "laplace_exponential" | "laplace-exponential" => Ok(FeatureMapKind::LaplaceExponential),
            "laplace_levy" | "laplace-levy" => Ok(FeatureMapKind::LaplaceLevy),
            other => Err(Error::Config(format!("unknown feature map kind {other:?}"))),
        }
    }
}

/// Frozen sampled weights of the kernel feature map.
///
/// All stored values are exactly representable as `f32`, so the bank
/// survives the on-disk format unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomFeatureBank {
    pub kind: FeatureMapKind,
    /// `s x d`, one row per random feature.
    pub weights: Array2<f64>,
    /// Length `s`; zero for the Laplace kinds.
    pub phases: Array1<f64>,
    pub seed: u64,
    pub bandwidth: f64,
}

#[inline]
pub(crate) fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

pub fn sample_feature_bank(kind: FeatureMapKind, s: usize, d: usize, seed: u64) -> RandomFeatureBank {
    sample_feature_bank_with_bandwidth(kind, s, d, seed, 1.0)
}

/// Like [`sample_feature_bank`], with weights scaled by `1 / bandwidth`. For
/// the Fourier kind this approximates `exp(-||z - z'||^2 / (2 bandwidth^2))`.
pub fn sample_feature_bank_with_bandwidth(
    kind: FeatureMapKind,
    s: usize,
    d: usize,
    seed: u64,
    bandwidth: f64,
) -> RandomFeatureBank {
    assert!(s >= 1 && d >= 1, "feature bank needs s >= 1 and d >= 1");
    assert!(bandwidth > 0.0 && bandwidth.is_finite(), "bandwidth must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / bandwidth;
    let weights = Array2::from_shape_simple_fn((s, d), || {
        let w: f64 = match kind {
            FeatureMapKind::Fourier => StandardNormal.sample(&mut rng),
            FeatureMapKind::LaplaceExponential => Exp1.sample(&mut rng),
            FeatureMapKind::LaplaceLevy => sample_levy(&mut rng),
        };
        round_f32(w * scale)
    });
    let phases = match kind {
        FeatureMapKind::Fourier => {
            Array1::from_shape_simple_fn(s, || round_f32(rng.random_range(0.0..std::f64::consts::TAU)))
        }
        _ => Array1::zeros(s),
    };
    RandomFeatureBank {
        kind,
        weights,
        phases,
        seed,
        bandwidth,
    }
}

/// Standard Levy draw (one-sided stable, alpha = 1/2): `1 / Z^2` for a
/// standard normal `Z`. Clamped to keep weights finite in `f32`.
fn sample_levy(rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (1.0 / (z * z)).min(1e30)
}

impl RandomFeatureBank {
    pub fn features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Maps a batch of rows (`B x d`) to `B x s`.
    pub fn map_batch(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, bank expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("feature map input".into()));
        }
        let s = self.features() as f64;
        let mut proj = batch.dot(&self.weights.t());
        match self.kind {
            FeatureMapKind::Fourier => {
                let amp = (2.0 / s).sqrt();
                for mut row in proj.rows_mut() {
                    for (v, &p) in row.iter_mut().zip(self.phases.iter()) {
                        *v = amp * (*v + p).cos();
                    }
                }
            }
            FeatureMapKind::LaplaceExponential | FeatureMapKind::LaplaceLevy => {
                proj.mapv_inplace(|v| (-v).min(LAPLACE_EXP_CLAMP).exp() / s);
            }
        }
        if proj.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("feature map output".into()));
        }
        Ok(proj)
    }
}

pub fn feature_map(z: &[f64], bank: &RandomFeatureBank) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, z.len()), z).expect("row view");
    Ok(bank.map_batch(view)?.into_raw_vec_and_offset().0)
}

/// Learnable parameters of one player network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// `E x s`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl NetworkParams {
    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn embedding_size(&self) -> usize {
        self.b2.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let s = self.features();
        let e = self.embedding_size();
        let ok = self.beta.len() == s
            && self.running_mean.len() == s
            && self.running_var.len() == s
            && self.w2.dim() == (e, s);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent network parameter shapes".into()))
        }
    }

    /// Folds the batch statistics recorded in a training-mode cache into the
    /// running estimates.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) {
        let Some(stats) = &cache.batch_stats else { return };
        let b = cache.rows as f64;
        let unbiased = b / (b - 1.0);
        self.running_mean
            .zip_mut_with(&stats.mean, |r, &m| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m);
        self.running_var.zip_mut_with(&stats.var, |r, &v| {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbiased
        });
    }

    pub(crate) fn round_to_f32(&mut self) {
        for a in [&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var, &mut self.b2] {
            a.mapv_inplace(round_f32);
        }
        self.w2.mapv_inplace(round_f32);
    }

    pub(crate) fn is_finite(&self) -> bool {
        [&self.gamma, &self.beta, &self.running_mean, &self.running_var, &self.b2]
            .iter()
            .all(|a| a.iter().all(|v| v.is_finite()))
            && self.w2.iter().all(|v| v.is_finite())
    }
}

pub fn init_params(bank: &RandomFeatureBank, embedding: usize, seed: u64) -> Result<NetworkParams> {
    if embedding < 2 {
        return Err(Error::Config(format!("embedding size must be >= 2, got {embedding}")));
    }
    let s = bank.features();
    let limit = (6.0 / (s + embedding) as f64).sqrt();
    // Largest f32 not above the limit, so rounding can never exceed it.
    let mut lim32 = limit as f32;
    if f64::from(lim32) > limit {
        lim32 = f32::from_bits(lim32.to_bits() - 1);
    }
    let lim = f64::from(lim32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w2 = Array2::from_shape_simple_fn((embedding, s), || round_f32(rng.random_range(-lim..=lim)));
    Ok(NetworkParams {
        gamma: Array1::ones(s),
        beta: Array1::zeros(s),
        running_mean: Array1::zeros(s),
        running_var: Array1::ones(s),
        w2,
        b2: Array1::zeros(embedding),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { keep_prob: f64, dropout_seed: u64 },
    Infer,
}

#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased (population) variance of the batch.
    pub var: Array1<f64>,
}

/// Intermediates kept by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    rows: usize,
    features: usize,
    embedding: usize,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_stats: Option<BatchStats>,
    /// Dropout mask already divided by the keep probability.
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
    embeddings: Array2<f64>,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn batch_stats(&self) -> Option<&BatchStats> {
        self.batch_stats.as_ref()
    }

    pub fn dropout_mask(&self) -> Option<&Array2<f64>> {
        self.mask.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros_like(p: &NetworkParams) -> Self {
        ParamGrads {
            gamma: Array1::zeros(p.gamma.len()),
            beta: Array1::zeros(p.beta.len()),
            w2: Array2::zeros(p.w2.dim()),
            b2: Array1::zeros(p.b2.len()),
        }
    }
}

pub fn forward(
    params: &NetworkParams,
    bank: &RandomFeatureBank,
    batch: ArrayView2<'_, f64>,
    mode: Mode,
) -> Result<(Array2<f64>, ForwardCache)> {
    let mapped = bank.map_batch(batch)?;
    forward_mapped(params, mapped.view(), mode)
}

/// Forward pass from already-mapped kernel features (`B x s`). The bank is
/// frozen, so callers may map a dataset once and reuse it.
pub fn forward_mapped(
    params: &NetworkParams,
    mapped: ArrayView2<'_, f64>,
    mode: Mode,
) -> Result<(Array2<f64>, ForwardCache)> {
    params.check_shapes()?;
    let (rows, s) = mapped.dim();
    if s != params.features() {
        return Err(Error::Shape(format!("mapped batch has {s} features, network expects {}", params.features())));
    }
    let (mean, var, batch_stats) = match mode {
        Mode::Train { .. } => {
            if rows < 2 {
                return Err(Error::BatchTooSmall(rows));
            }
            let mean = mapped.mean_axis(Axis(0)).expect("nonempty");
            let var = mapped.var_axis(Axis(0), 0.0);
            (mean.clone(), var.clone(), Some(BatchStats { mean, var }))
        }
        Mode::Infer => {
            if rows == 0 {
                return Err(Error::Shape("empty batch".into()));
            }
            (params.running_mean.clone(), params.running_var.clone(), None)
        }
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = (&mapped - &mean) * &inv_std;
    let normed = &xhat * &params.gamma + &params.beta;

    let (mask, dropped) = match mode {
        Mode::Train { keep_prob, dropout_seed } => {
            if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                return Err(Error::Config(format!("keep_prob must be in (0, 1], got {keep_prob}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let scale = 1.0 / keep_prob;
            let mask = Array2::from_shape_simple_fn((rows, s), || {
                if rng.random::<f64>() < keep_prob { scale } else { 0.0 }
            });
            let dropped = &normed * &mask;
            (Some(mask), dropped)
        }
        Mode::Infer => (None, normed),
    };

    let mut logits = dropped.dot(&params.w2.t()) + &params.b2;
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("softmax embedding".into()));
    }
    let cache = ForwardCache {
        rows,
        features: s,
        embedding: params.embedding_size(),
        xhat,
        inv_std,
        batch_stats,
        mask,
        dropped,
        embeddings: logits.clone(),
    };
    Ok((logits, cache))
}

fn check_cache(cache: &ForwardCache, params: &NetworkParams, grad: &Array2<f64>) -> Result<()> {
    if grad.dim() != (cache.rows, cache.embedding) {
        return Err(Error::CacheMismatch(format!(
            "upstream gradient is {:?}, cache holds {}x{}",
            grad.dim(),
            cache.rows,
            cache.embedding
        )));
    }
    if params.features() != cache.features || params.embedding_size() != cache.embedding {
        return Err(Error::CacheMismatch("parameter shapes differ from the cached forward".into()));
    }
    Ok(())
}

/// Gradient of the loss w.r.t. the pre-dropout batch-norm output.
fn grad_normed(cache: &ForwardCache, params: &NetworkParams, grad: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let h = &cache.embeddings;
    let dot = (grad * h).sum_axis(Axis(1)).insert_axis(Axis(1));
    let dlogits = h * &(grad - &dot);
    let mut dnormed = dlogits.dot(&params.w2);
    if let Some(mask) = &cache.mask {
        dnormed *= mask;
    }
    (dlogits, dnormed)
}

pub fn backward(cache: &ForwardCache, params: &NetworkParams, grad_embeddings: &Array2<f64>) -> Result<ParamGrads> {
    check_cache(cache, params, grad_embeddings)?;
    let (dlogits, dnormed) = grad_normed(cache, params, grad_embeddings);
    Ok(ParamGrads {
        gamma: (&dnormed * &cache.xhat).sum_axis(Axis(0)),
        beta: dnormed.sum_axis(Axis(0)),
        w2: dlogits.t().dot(&cache.dropped),
        b2: dlogits.sum_axis(Axis(0)),
    })
}

/// Gradient w.r.t. the mapped kernel features, including the path through
/// the batch mean and variance in training mode.
pub fn input_gradient(cache: &ForwardCache, params: &NetworkParams, grad_embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    check_cache(cache, params, grad_embeddings)?;
    let (_, dnormed) = grad_normed(cache, params, grad_embeddings);
    let dxhat = &dnormed * &params.gamma;
    if cache.batch_stats.is_none() {
        return Ok(dxhat * &cache.inv_std);
    }
    let b = cache.rows as f64;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let inner = dxhat * b - &sum_dxhat - &(&cache.xhat * &sum_dxhat_xhat);
    Ok(inner * &(&cache.inv_std / b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_bank(kind: FeatureMapKind, s: usize, d: usize) -> RandomFeatureBank {
        RandomFeatureBank {
            kind,
            weights: Array2::zeros((s, d)),
            phases: Array1::zeros(s),
            seed: 0,
            bandwidth: 1.0,
        }
    }

    #[test]
    fn zero_bank_feature_maps() {
        let f = feature_map(&[0.3, -1.0, 2.0], &tiny_bank(FeatureMapKind::Fourier, 2, 3)).unwrap();
        assert_eq!(f, vec![1.0, 1.0]);
        let l = feature_map(&[0.3, 1.0, 2.0], &tiny_bank(FeatureMapKind::LaplaceExponential, 4, 3)).unwrap();
        assert_eq!(l, vec![0.25; 4]);
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let bank = tiny_bank(FeatureMapKind::Fourier, 2, 2);
        assert!(matches!(feature_map(&[f64::NAN, 0.0], &bank), Err(Error::Numerics(_))));
        assert!(matches!(feature_map(&[0.0], &bank), Err(Error::Shape(_))));
    }

    #[test]
    fn laplace_exponent_is_clamped() {
        let mut bank = tiny_bank(FeatureMapKind::LaplaceLevy, 1, 1);
        bank.weights[[0, 0]] = 1.0;
        let out = feature_map(&[-1e6], &bank).unwrap();
        assert_eq!(out[0], 30f64.exp());
    }

    #[test]
    fn bank_sampling() {
        let a = sample_feature_bank(FeatureMapKind::Fourier, 16, 8, 9);
        assert_eq!(a, sample_feature_bank(FeatureMapKind::Fourier, 16, 8, 9));
        assert_ne!(a, sample_feature_bank(FeatureMapKind::Fourier, 16, 8, 10));
        assert!(a.phases.iter().all(|&p| (0.0..=std::f64::consts::TAU).contains(&p)));
        let e = sample_feature_bank(FeatureMapKind::LaplaceExponential, 64, 8, 1);
        assert!(e.weights.iter().all(|&w| w >= 0.0));
        let l = sample_feature_bank(FeatureMapKind::LaplaceLevy, 64, 8, 1);
        assert!(l.weights.iter().all(|&w| w >= 0.0 && w.is_finite()));
        assert!(a.weights.iter().all(|&w| f64::from(w as f32) == w));
    }

    #[test]
    fn gaussian_weights_have_zero_mean() {
        let (s, d) = (10_000, 512);
        let bank = sample_feature_bank(FeatureMapKind::Fourier, s, d, 42);
        let mean = bank.weights.mean().unwrap();
        assert!(mean.abs() <= 3.0 / ((s * d) as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn init_params_contract() {
        let bank = sample_feature_bank(FeatureMapKind::Fourier, 32, 8, 1);
        let p = init_params(&bank, 6, 5).unwrap();
        assert_eq!(p, init_params(&bank, 6, 5).unwrap());
        let limit = (6.0f64 / 38.0).sqrt();
        assert!(p.w2.iter().all(|w| w.abs() <= limit));
        assert!(p.gamma.iter().all(|&g| g == 1.0));
        assert!(p.running_var.iter().all(|&v| v == 1.0));
        assert!(matches!(init_params(&bank, 1, 5), Err(Error::Config(_))));
    }

    fn batch(rows: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, d), || rng.random_range(0.0..3.0))
    }

    #[test]
    fn infer_zero_head_is_uniform() {
        let bank = sample_feature_bank(FeatureMapKind::Fourier, 16, 8, 1);
        let mut p = init_params(&bank, 4, 2).unwrap();
        p.w2.fill(0.0);
        let (h, _) = forward(&p, &bank, batch(3, 8, 1).view(), Mode::Infer).unwrap();
        assert!(h.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rows_are_probability_vectors() {
        let bank = sample_feature_bank(FeatureMapKind::Fourier, 16, 8, 1);
        let p = init_params(&bank, 5, 2).unwrap();
        for mode in [Mode::Infer, Mode::Train { keep_prob: 0.75, dropout_seed: 3 }] {
            let (h, _) = forward(&p, &bank, batch(6, 8, 4).view(), mode).unwrap();
            for row in h.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn train_mode_is_reproducible_and_needs_two_rows() {
        let bank = sample_feature_bank(FeatureMapKind::Fourier, 16, 8, 1);
        let p = init_params(&bank, 4, 2).unwrap();
        let x = batch(4, 8, 9);
        let mode = Mode::Train { keep_prob: 0.5, dropout_seed: 11 };
        let (a, _) = forward(&p, &bank, x.view(), mode).unwrap();
        let (b, _) = forward(&p, &bank, x.view(), mode).unwrap();
        assert_eq!(a, b);
        let (c, _) = forward(&p, &bank, x.view(), Mode::Train { keep_prob: 0.5, dropout_seed: 12 }).unwrap();
        assert_ne!(a, c);
        assert!(matches!(
            forward(&p, &bank, batch(1, 8, 1).view(), mode),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn backward_zero_and_linearity() {
        let bank = sample_feature_bank(FeatureMapKind::Fourier, 16, 8, 1);
        let p = init_params(&bank, 4, 2).unwrap();
        let (_, cache) = forward(&p, &bank, batch(4, 8, 1).view(), Mode::Train { keep_prob: 0.75, dropout_seed: 1 }).unwrap();
        let zero = backward(&cache, &p, &Array2::zeros((4, 4))).unwrap();
        assert_eq!(zero, ParamGrads::zeros_like(&p));

        let g = batch(4, 4, 2);
        let one = backward(&cache, &p, &g).unwrap();
        let two = backward(&cache, &p, &(&g * 2.0)).unwrap();
        for (a, b) in one.w2.iter().zip(two.w2.iter()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        for (a, b) in one.gamma.iter().zip(two.gamma.iter()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!(matches!(backward(&cache, &p, &Array2::zeros((3, 4))), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let bank = sample_feature_bank(FeatureMapKind::Fourier, 4, 2, 1);
        let mut p = init_params(&bank, 2, 2).unwrap();
        let u = array![[1.0, 2.0, 3.0, 4.0], [3.0, 2.0, 1.0, 0.0]];
        let (_, cache) = forward_mapped(&p, u.view(), Mode::Train { keep_prob: 1.0, dropout_seed: 0 }).unwrap();
        p.absorb_batch_stats(&cache);
        assert!((p.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased var of {1,3} = 2
        assert!((p.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        assert!((p.running_var[1] - 0.9).abs() < 1e-12);
    }
}
