//! Fixed-function histogram-modulus baseline.
//!
//! Each of the 512 histogram bins is reduced modulo a power of two that grows
//! with the square root of the file length. Two digests are compared by the
//! largest circular difference over all bins, which lower-bounds the number
//! of byte edits separating the files as long as no bin wrapped around.

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD;

use crate::error::{Error, Result};
use crate::features::{FEATURE_DIM, FeatureVector};
use crate::similarity::ThresholdConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SahashDigest {
    pub reduced: Vec<u32>,
    pub modulus: u64,
    pub file_length: u64,
}

/// `2^max(8, ceil(log2(l) / 2))`.
pub fn sahash_modulus(file_length: u64) -> Result<u64> {
    if file_length == 0 {
        return Err(Error::EmptyFile);
    }
    // ceil(log2 l), exact for integers; ceil(x/2) == ceil(ceil(x)/2).
    let ceil_log2 = if file_length == 1 {
        0
    } else {
        64 - (file_length - 1).leading_zeros()
    };
    let exp = ceil_log2.div_ceil(2).max(8);
    Ok(1u64 << exp)
}

pub fn sahash_digest(x: &FeatureVector) -> Result<SahashDigest> {
    let m = sahash_modulus(x.file_length())?;
    let reduced = x.counts().iter().map(|&c| (c % m) as u32).collect();
    Ok(SahashDigest {
        reduced,
        modulus: m,
        file_length: x.file_length(),
    })
}

pub fn sahash_distance(a: &SahashDigest, b: &SahashDigest) -> Result<u64> {
    if a.modulus != b.modulus {
        return Err(Error::IncompatibleDigests(a.modulus, b.modulus));
    }
    let m = a.modulus;
    Ok(a.reduced
        .iter()
        .zip(&b.reduced)
        .map(|(&x, &y)| {
            let d = u64::from(x.abs_diff(y));
            d.min(m - d)
        })
        .max()
        .unwrap_or(0))
}

pub fn sahash_similar(distance: u64, uneva_dist: u32, cfg: &ThresholdConfig) -> bool {
    distance <= u64::from(cfg.tau_digest) && uneva_dist <= cfg.tau_uneva
}

impl SahashDigest {
    /// `sahash:v1:<m>:<base64 of 512 little-endian u32>`.
    pub fn to_text(&self) -> String {
        let mut raw = Vec::with_capacity(FEATURE_DIM * 4);
        for v in &self.reduced {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        format!("sahash:v1:{}:{}", self.modulus, STANDARD.encode(raw))
    }

    /// Parses the text form. File length is not part of it and comes back 0.
    pub fn from_text(s: &str) -> Result<SahashDigest> {
        let mut parts = s.trim().splitn(4, ':');
        let (Some("sahash"), Some("v1"), Some(m), Some(body)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::format(0, "expected sahash:v1:<m>:<base64>"));
        };
        let modulus: u64 = m
            .parse()
            .map_err(|_| Error::format(10, format!("bad modulus {m:?}")))?;
        if !modulus.is_power_of_two() || modulus < 256 {
            return Err(Error::format(10, format!("modulus {modulus} is not a power of two >= 256")));
        }
        let raw = STANDARD
            .decode(body)
            .map_err(|e| Error::format(0, format!("base64: {e}")))?;
        if raw.len() != FEATURE_DIM * 4 {
            return Err(Error::format(raw.len(), "expected 512 u32 values"));
        }
        let reduced: Vec<u32> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = reduced.iter().position(|&v| u64::from(v) >= modulus) {
            return Err(Error::format(i * 4, "reduced value not below modulus"));
        }
        Ok(SahashDigest {
            reduced,
            modulus,
            file_length: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smallest n with 2^(2n) >= l, floored at 8; independent of the bit trick.
    fn modulus_oracle(l: u64) -> u64 {
        let mut n = 0u32;
        while (1u128 << (2 * n)) < u128::from(l) {
            n += 1;
        }
        1u64 << n.max(8)
    }

    #[test]
    fn modulus_examples() {
        assert_eq!(sahash_modulus(65536).unwrap(), 256);
        assert_eq!(sahash_modulus(256).unwrap(), 256);
        assert_eq!(sahash_modulus(1 << 30).unwrap(), 32768);
        assert_eq!(sahash_modulus(1_000_000).unwrap(), 1024);
        assert!(matches!(sahash_modulus(0), Err(Error::EmptyFile)));
        for l in [1u64, 2, 3, 255, 256, 257, 65535, 65537, 1 << 20, (1 << 20) + 1, u64::MAX] {
            assert_eq!(sahash_modulus(l).unwrap(), modulus_oracle(l), "l={l}");
        }
    }

    fn fv(counts: [u64; FEATURE_DIM], l: u64) -> FeatureVector {
        FeatureVector::from_counts(counts, l)
    }

    #[test]
    fn digest_reduces() {
        let mut c = [0u64; FEATURE_DIM];
        c[0] = 300;
        c[1] = 17;
        let d = sahash_digest(&fv(c, 256)).unwrap();
        assert_eq!(d.reduced[0], 44);
        assert_eq!(d.reduced[1], 17);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let counts: [u64; FEATURE_DIM] = std::array::from_fn(|_| rng.random_range(0..100_000));
        let d = sahash_digest(&fv(counts, 1_000_000)).unwrap();
        assert_eq!(d.modulus, 1024);
        for (r, c) in d.reduced.iter().zip(counts) {
            assert_eq!(u64::from(*r), c % 1024);
        }
    }

    #[test]
    fn distance_examples() {
        let base = SahashDigest { reduced: vec![10; FEATURE_DIM], modulus: 256, file_length: 1 };
        assert_eq!(sahash_distance(&base, &base).unwrap(), 0);
        let mut other = base.clone();
        other.reduced[7] = 13;
        assert_eq!(sahash_distance(&base, &other).unwrap(), 3);

        let mut a = base.clone();
        let mut b = base.clone();
        a.reduced[5] = 255;
        b.reduced[5] = 0;
        assert_eq!(sahash_distance(&a, &b).unwrap(), 1);

        let mut wide = base.clone();
        wide.modulus = 512;
        assert!(matches!(sahash_distance(&base, &wide), Err(Error::IncompatibleDigests(256, 512))));
    }

    #[test]
    fn circular_difference_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = 256u64;
            let a: Vec<u32> = (0..FEATURE_DIM).map(|_| rng.random_range(0..m as u32)).collect();
            let b: Vec<u32> = (0..FEATURE_DIM).map(|_| rng.random_range(0..m as u32)).collect();
            // shortest walk around the ring, by counting steps
            let oracle = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| {
                    let fwd = (0..m).find(|k| (u64::from(x) + k) % m == u64::from(y)).unwrap();
                    fwd.min(m - fwd) % m
                })
                .max()
                .unwrap();
            let da = SahashDigest { reduced: a, modulus: m, file_length: 1 };
            let db = SahashDigest { reduced: b, modulus: m, file_length: 1 };
            assert_eq!(sahash_distance(&da, &db).unwrap(), oracle);
            assert_eq!(sahash_distance(&db, &da).unwrap(), oracle);
        }
    }

    #[test]
    fn similar_predicate() {
        let cfg = ThresholdConfig { tau_delta: 0.1, tau_digest: 10, tau_uneva: 80 };
        assert!(sahash_similar(0, 0, &cfg));
        assert!(!sahash_similar(11, 0, &cfg));
        assert!(!sahash_similar(5, 90, &cfg));
        assert!(sahash_similar(10, 80, &cfg));
    }

    #[test]
    fn text_round_trip_and_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = SahashDigest {
            reduced: (0..FEATURE_DIM).map(|_| rng.random_range(0..1024)).collect(),
            modulus: 1024,
            file_length: 0,
        };
        let t = d.to_text();
        assert!(t.starts_with("sahash:v1:1024:"));
        assert_eq!(SahashDigest::from_text(&t).unwrap(), d);
        assert!(SahashDigest::from_text("sahash:v2:256:AAAA").is_err());
        assert!(SahashDigest::from_text("sahash:v1:300:AAAA").is_err());
        assert!(SahashDigest::from_text("sahash:v1:256:AAAA").is_err());
    }
}
