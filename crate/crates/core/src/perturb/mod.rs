//! File perturbations: masked bit substitutions for training and byte-level
//! insert/delete/overlay edits for generalization tests.

mod pe;

pub use pe::{GENERIC_HEADER_LEN, protected_regions_pe};

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trainer::derive_seed;

/// Sorted, non-overlapping `[start, end)` byte ranges that must not change.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ProtectedRegions {
    ranges: Vec<(usize, usize)>,
}

impl ProtectedRegions {
    /// Clamps to `len`, drops empty ranges, sorts and merges.
    pub fn new(mut ranges: Vec<(usize, usize)>, len: usize) -> Self {
        for r in ranges.iter_mut() {
            r.0 = r.0.min(len);
            r.1 = r.1.min(len);
        }
        ranges.retain(|r| r.0 < r.1);
        ranges.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(ranges.len());
        for (s, e) in ranges {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        ProtectedRegions { ranges: merged }
    }

    pub fn none() -> Self {
        ProtectedRegions::default()
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.ranges.iter().any(|&(s, e)| (s..e).contains(&pos))
    }

    pub fn protected_len(&self) -> usize {
        self.ranges.iter().map(|(s, e)| e - s).sum()
    }

    /// Complement of the regions within `[0, len)`.
    fn mutable_spans(&self, len: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.ranges.len() + 1);
        let mut cursor = 0;
        for &(s, e) in &self.ranges {
            if s > cursor {
                out.push((cursor, s.min(len)));
            }
            cursor = cursor.max(e);
        }
        if cursor < len {
            out.push((cursor, len));
        }
        out
    }
}

/// Flips exactly `rho` distinct bits chosen uniformly among bytes outside
/// `regions`.
pub fn substitute_bits(f: &[u8], rho: usize, regions: &ProtectedRegions, seed: u64) -> Result<Vec<u8>> {
    if rho == 0 {
        return Err(Error::Range("rho must be >= 1".into()));
    }
    let spans = regions.mutable_spans(f.len());
    let mutable_bytes: usize = spans.iter().map(|(s, e)| e - s).sum();
    let available = mutable_bytes * 8;
    if available < rho {
        return Err(Error::NoMutableBytes { needed: rho, available });
    }
    // prefix[i] = mutable bytes before span i
    let mut prefix = Vec::with_capacity(spans.len());
    let mut acc = 0;
    for (s, e) in &spans {
        prefix.push(acc);
        acc += e - s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = f.to_vec();
    for bit in index::sample(&mut rng, available, rho) {
        let nth = bit / 8;
        let span = prefix.partition_point(|&p| p <= nth) - 1;
        let pos = spans[span].0 + (nth - prefix[span]);
        out[pos] ^= 1 << (bit % 8);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PerturbKind {
    BitSubstitution { rho: usize },
    InsertBytes { offset: usize, payload: Vec<u8> },
    DeleteBytes { offset: usize, len: usize },
    /// Appends `len` seeded random bytes.
    AppendOverlay { len: usize },
    /// Removes `len` trailing bytes.
    TruncateOverlay { len: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub seed: u64,
}

fn random_bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    buf
}

/// Applies one perturbation. Bit substitutions honor PE-aware protection.
pub fn apply_edit(f: &[u8], spec: &PerturbSpec) -> Result<Vec<u8>> {
    match &spec.kind {
        PerturbKind::BitSubstitution { rho } => substitute_bits(f, *rho, &protected_regions_pe(f), spec.seed),
        PerturbKind::InsertBytes { offset, payload } => {
            if *offset > f.len() {
                return Err(Error::Range(format!("insert offset {offset} beyond length {}", f.len())));
            }
            let mut out = Vec::with_capacity(f.len() + payload.len());
            out.extend_from_slice(&f[..*offset]);
            out.extend_from_slice(payload);
            out.extend_from_slice(&f[*offset..]);
            Ok(out)
        }
        PerturbKind::DeleteBytes { offset, len } => {
            let end = offset.checked_add(*len).filter(|&e| e <= f.len());
            let Some(end) = end else {
                return Err(Error::Range(format!("delete {offset}+{len} beyond length {}", f.len())));
            };
            let mut out = Vec::with_capacity(f.len() - len);
            out.extend_from_slice(&f[..*offset]);
            out.extend_from_slice(&f[end..]);
            Ok(out)
        }
        PerturbKind::AppendOverlay { len } => {
            let mut out = f.to_vec();
            out.extend_from_slice(&random_bytes(*len, spec.seed));
            Ok(out)
        }
        PerturbKind::TruncateOverlay { len } => {
            if *len >= f.len() {
                return Err(Error::Range(format!("truncate {len} must be below length {}", f.len())));
            }
            Ok(f[..f.len() - len].to_vec())
        }
    }
}

impl PerturbSpec {
    /// Parses the CLI grammar: `bitsub:rho=N`, `insert:off=N,len=N`,
    /// `delete:off=N,len=N`, `overlay:len=N`, `truncate:len=N`. Insert
    /// payloads are seeded random bytes.
    pub fn parse(text: &str, seed: u64) -> Result<PerturbSpec> {
        let (name, args) = text.split_once(':').unwrap_or((text, ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in args.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in {part:?}")))?;
            let v: usize = v.parse().map_err(|_| Error::Config(format!("{k} must be a non-negative integer")))?;
            kv.insert(k.trim(), v);
        }
        let mut get = |k: &str| {
            kv.remove(k).ok_or_else(|| Error::Config(format!("{name} requires {k}=N")))
        };
        let kind = match name {
            "bitsub" => {
                let rho = get("rho")?;
                if rho == 0 {
                    return Err(Error::Config("rho must be >= 1".into()));
                }
                PerturbKind::BitSubstitution { rho }
            }
            "insert" => {
                let offset = get("off")?;
                let len = get("len")?;
                PerturbKind::InsertBytes { offset, payload: random_bytes(len, seed) }
            }
            "delete" => PerturbKind::DeleteBytes { offset: get("off")?, len: get("len")? },
            "overlay" => PerturbKind::AppendOverlay { len: get("len")? },
            "truncate" => PerturbKind::TruncateOverlay { len: get("len")? },
            other => return Err(Error::Config(format!("unknown perturbation {other:?}"))),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unexpected key {k:?} for {name}")));
        }
        Ok(PerturbSpec { kind, seed })
    }

    /// Bytes added minus bytes removed (zero for substitutions).
    pub fn size_delta(&self) -> i64 {
        match &self.kind {
            PerturbKind::BitSubstitution { .. } => 0,
            PerturbKind::InsertBytes { payload, .. } => payload.len() as i64,
            PerturbKind::DeleteBytes { len, .. } | PerturbKind::TruncateOverlay { len } => -(*len as i64),
            PerturbKind::AppendOverlay { len } => *len as i64,
        }
    }

    /// Number of bytes touched, the magnitude on edit robustness curves.
    pub fn magnitude(&self) -> usize {
        match &self.kind {
            PerturbKind::BitSubstitution { rho } => *rho,
            PerturbKind::InsertBytes { payload, .. } => payload.len(),
            PerturbKind::DeleteBytes { len, .. }
            | PerturbKind::TruncateOverlay { len }
            | PerturbKind::AppendOverlay { len } => *len,
        }
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            PerturbKind::BitSubstitution { rho } => write!(f, "bitsub:rho={rho}"),
            PerturbKind::InsertBytes { offset, payload } => write!(f, "insert:off={offset},len={}", payload.len()),
            PerturbKind::DeleteBytes { offset, len } => write!(f, "delete:off={offset},len={len}"),
            PerturbKind::AppendOverlay { len } => write!(f, "overlay:len={len}"),
            PerturbKind::TruncateOverlay { len } => write!(f, "truncate:len={len}"),
        }
    }
}

impl FromStr for PerturbSpec {
    type Err = Error;

    /// Parses with seed 0; use [`PerturbSpec::parse`] to pick the seed.
    fn from_str(s: &str) -> Result<Self> {
        PerturbSpec::parse(s, 0)
    }
}

/// An original file, its substitution mutant and the number of flipped bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub index: usize,
    pub original: Vec<u8>,
    pub perturbed: Vec<u8>,
    pub rho: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPairs {
    pub pairs: Vec<TrainingPair>,
    /// Files with too few mutable bits for their drawn rho.
    pub skipped: usize,
}

/// One substitution mutant per file with `rho ~ Uniform{1..=rho_max}`.
pub fn make_training_pairs<F: AsRef<[u8]>>(corpus: &[F], rho_max: usize, seed: u64) -> Result<TrainingPairs> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty corpus".into()));
    }
    if rho_max == 0 {
        return Err(Error::Range("rho_max must be >= 1".into()));
    }
    let mut pairs = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for (index, file) in corpus.iter().enumerate() {
        let file = file.as_ref();
        let file_seed = derive_seed(seed, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(file_seed);
        let rho = rng.random_range(1..=rho_max);
        match substitute_bits(file, rho, &protected_regions_pe(file), rng.random()) {
            Ok(perturbed) => pairs.push(TrainingPair { index, original: file.to_vec(), perturbed, rho }),
            Err(Error::NoMutableBytes { .. }) => {
                log::debug!("file {index}: too few mutable bits for rho={rho}, skipped");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainingPairs { pairs, skipped })
}

/// Number of differing bits.
pub fn hamming_distance(a: &[u8], b: &[u8]) -> u64 {
    a.iter().zip(b).map(|(x, y)| u64::from((x ^ y).count_ones())).sum()
}
