//! Model file: `"AKSH"`, `u32` version, `u32` metadata length, JSON metadata,
//! then little-endian `f32` arrays. Per bank: weights, phases. Per network
//! (generator first): gamma, beta, running mean, running var, dense weights,
//! dense bias.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::kernel_net::{
    BN_EPS, BN_MOMENTUM, FeatureMapKind, LAPLACE_EXP_CLAMP, LEVY_ALPHA, NetworkParams, RandomFeatureBank,
};
use crate::trainer::{EpochStats, TrainConfig, TrainedModel};

pub const MODEL_MAGIC: &[u8; 4] = b"AKSH";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    kind: FeatureMapKind,
    features: u32,
    input_dim: u32,
    embedding: u32,
    banks: u32,
    bank_seeds: Vec<u64>,
    bandwidth: f64,
    shift_bits: u32,
    keep_prob: f64,
    bn_eps: f64,
    bn_momentum: f64,
    levy_alpha: f64,
    laplace_exp_clamp: f64,
    tau_delta: Option<f64>,
    fingerprint: String,
    train_config: TrainConfig,
    loss_history: Vec<EpochStats>,
}

fn push_all<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn array_payload(model: &TrainedModel) -> Vec<u8> {
    let mut out = Vec::new();
    for bank in &model.banks {
        push_all(&mut out, bank.weights.iter());
        push_all(&mut out, bank.phases.iter());
    }
    for p in [&model.generator, &model.adversary] {
        push_all(&mut out, p.gamma.iter());
        push_all(&mut out, p.beta.iter());
        push_all(&mut out, p.running_mean.iter());
        push_all(&mut out, p.running_var.iter());
        push_all(&mut out, p.w2.iter());
        push_all(&mut out, p.b2.iter());
    }
    out
}

fn fingerprint_of(kind: FeatureMapKind, dims: [u32; 5], payload: &[u8]) -> [u8; 8] {
    let mut h = Sha256::new();
    h.update(MODEL_MAGIC);
    h.update(MODEL_VERSION.to_le_bytes());
    h.update([kind.tag()]);
    for d in dims {
        h.update(d.to_le_bytes());
    }
    h.update(payload);
    h.finalize()[..8].try_into().expect("8 bytes")
}

fn dims_of(model: &TrainedModel) -> [u32; 5] {
    let bank = model.generator_bank();
    [
        bank.features() as u32,
        bank.input_dim() as u32,
        model.embedding_size() as u32,
        model.config.shift_bits,
        model.banks.len() as u32,
    ]
}

/// First 8 bytes of SHA-256 over everything that determines the digest
/// function: feature map kind, shapes, shift, and the `f32` array payload.
pub fn model_fingerprint(model: &TrainedModel) -> [u8; 8] {
    fingerprint_of(model.generator_bank().kind, dims_of(model), &array_payload(model))
}

impl TrainedModel {
    pub fn fingerprint(&self) -> [u8; 8] {
        model_fingerprint(self)
    }
}

pub fn serialize_model(model: &TrainedModel) -> Vec<u8> {
    let payload = array_payload(model);
    let bank = model.generator_bank();
    let dims = dims_of(model);
    let meta = ModelMeta {
        kind: bank.kind,
        features: dims[0],
        input_dim: dims[1],
        embedding: dims[2],
        banks: dims[4],
        bank_seeds: model.banks.iter().map(|b| b.seed).collect(),
        bandwidth: bank.bandwidth,
        shift_bits: model.config.shift_bits,
        keep_prob: model.config.keep_prob,
        bn_eps: BN_EPS,
        bn_momentum: BN_MOMENTUM,
        levy_alpha: LEVY_ALPHA,
        laplace_exp_clamp: LAPLACE_EXP_CLAMP,
        tau_delta: model.tau_delta,
        fingerprint: hex::encode(fingerprint_of(bank.kind, dims, &payload)),
        train_config: model.config.clone(),
        loss_history: model.loss_history.clone(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

struct FloatCursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl FloatCursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::format(self.base + self.pos, "array too large"))?;
        if self.pos + bytes > self.buf.len() {
            return Err(Error::format(self.base + self.pos, format!("truncated in {what}")));
        }
        let out: Vec<f64> = self.buf[self.pos..self.pos + bytes]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(self.base + self.pos + 4 * i, format!("non-finite value in {what}")));
        }
        self.pos += bytes;
        Ok(out)
    }

    fn vec(&mut self, n: usize, what: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.take(n, what)?))
    }

    fn mat(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let v = self.take(rows * cols, what)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("sized"))
    }
}

pub fn deserialize_model(buf: &[u8]) -> Result<TrainedModel> {
    if buf.len() < 12 {
        return Err(Error::format(buf.len(), "truncated model header"));
    }
    if &buf[..4] != MODEL_MAGIC {
        return Err(Error::format(0, "bad model magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(Error::format(4, format!("unsupported model version {version}")));
    }
    let json_len = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let json_end = 12usize
        .checked_add(json_len)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::format(8, "metadata length exceeds file"))?;
    let meta: ModelMeta =
        serde_json::from_slice(&buf[12..json_end]).map_err(|e| Error::format(12, format!("metadata: {e}")))?;

    let (s, d, e) = (meta.features as usize, meta.input_dim as usize, meta.embedding as usize);
    let n_banks = meta.banks as usize;
    if s == 0 || d == 0 || e < 2 || !(n_banks == 1 || n_banks == 2) || meta.bank_seeds.len() != n_banks {
        return Err(Error::format(12, "inconsistent shapes in metadata"));
    }
    let expected = s
        .checked_mul(d)
        .and_then(|sd| sd.checked_add(s))
        .and_then(|per_bank| per_bank.checked_mul(n_banks))
        .and_then(|banks| {
            let per_net = s.checked_mul(4)?.checked_add(e.checked_mul(s)?)?.checked_add(e)?;
            banks.checked_add(per_net.checked_mul(2)?)
        })
        .and_then(|floats| floats.checked_mul(4))
        .ok_or_else(|| Error::format(12, "shape overflow"))?;
    let payload = &buf[json_end..];
    if payload.len() != expected {
        return Err(Error::format(
            json_end + payload.len().min(expected),
            format!("array payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    let dims = [meta.features, meta.input_dim, meta.embedding, meta.shift_bits, meta.banks];
    let fp = fingerprint_of(meta.kind, dims, payload);
    if hex::encode(fp) != meta.fingerprint {
        return Err(Error::format(12, "fingerprint does not match model contents"));
    }

    let mut cur = FloatCursor { buf: payload, pos: 0, base: json_end };
    let mut banks = Vec::with_capacity(n_banks);
    for &seed in &meta.bank_seeds {
        banks.push(RandomFeatureBank {
            kind: meta.kind,
            weights: cur.mat(s, d, "bank weights")?,
            phases: cur.vec(s, "bank phases")?,
            seed,
            bandwidth: meta.bandwidth,
        });
    }
    let net = |cur: &mut FloatCursor<'_>| -> Result<NetworkParams> {
        let p = NetworkParams {
            gamma: cur.vec(s, "gamma")?,
            beta: cur.vec(s, "beta")?,
            running_mean: cur.vec(s, "running mean")?,
            running_var: cur.vec(s, "running var")?,
            w2: cur.mat(e, s, "dense weights")?,
            b2: cur.vec(e, "dense bias")?,
        };
        if p.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::format(json_end, "negative running variance"));
        }
        Ok(p)
    };
    let generator = net(&mut cur)?;
    let adversary = net(&mut cur)?;
    if meta.train_config.shift_bits != meta.shift_bits || meta.train_config.features != s {
        return Err(Error::format(12, "training config disagrees with array shapes"));
    }
    Ok(TrainedModel {
        banks,
        generator,
        adversary,
        config: meta.train_config,
        loss_history: meta.loss_history,
        tau_delta: meta.tau_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::train;

    fn small_model() -> TrainedModel {
        let cfg = TrainConfig { batch_size: 4, epochs: 2, features: 8, embedding: 3, ..TrainConfig::default() };
        let pairs: Vec<_> = (0..6u8).map(|i| (vec![i; 40], vec![i ^ 2; 40])).collect();
        let mut m = train(&pairs, &cfg, &mut |_| {}).unwrap();
        m.tau_delta = Some(0.125);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small_model();
        let bytes = serialize_model(&m);
        let back = deserialize_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(serialize_model(&back), bytes);
    }

    #[test]
    fn fingerprint_recomputes() {
        let m = small_model();
        let bytes = serialize_model(&m);
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + json_len]).unwrap();
        // independent recomputation straight from the file bytes
        let mut h = Sha256::new();
        h.update(b"AKSH");
        h.update(1u32.to_le_bytes());
        h.update([0u8]);
        for k in ["features", "input_dim", "embedding", "shift_bits", "banks"] {
            h.update((meta[k].as_u64().unwrap() as u32).to_le_bytes());
        }
        h.update(&bytes[12 + json_len..]);
        let expect = hex::encode(&h.finalize()[..8]);
        assert_eq!(meta["fingerprint"].as_str().unwrap(), expect);
        assert_eq!(hex::encode(m.fingerprint()), expect);
    }

    #[test]
    fn corrupt_streams_are_rejected() {
        let bytes = serialize_model(&small_model());
        for cut in [0, 5, 11, 40, bytes.len() - 3] {
            assert!(matches!(deserialize_model(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut magic = bytes.clone();
        magic[1] = b'x';
        assert!(matches!(deserialize_model(&magic), Err(Error::Format { offset: 0, .. })));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(deserialize_model(&version), Err(Error::Format { offset: 4, .. })));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x01;
        assert!(deserialize_model(&flipped).is_err());
    }
}
