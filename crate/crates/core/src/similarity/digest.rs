use base64::Engine as _;
use base64::engine::general_purpose::STANDARD;

use crate::error::{Error, Result};
use crate::features::UnevaVector;
use crate::trainer::TrainedModel;

pub const DIGEST_MAGIC: &[u8; 4] = b"AKDG";
pub const DIGEST_VERSION: u16 = 1;

/// Per-file fuzzy hash: both players' embeddings plus the uneva vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Digest {
    pub h_g: Vec<f32>,
    pub h_d: Vec<f32>,
    pub uneva: UnevaVector,
    pub model_fingerprint: [u8; 8],
    pub file_length: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DigestEncoding {
    /// Little-endian `f32` per embedding entry.
    #[default]
    Float32,
    /// Per-vector affine 8-bit quantization (`offset + q * scale`).
    Quantized8,
}

impl DigestEncoding {
    fn flag(self) -> u8 {
        match self {
            DigestEncoding::Float32 => 0,
            DigestEncoding::Quantized8 => 1,
        }
    }
}

pub fn make_digest(model: &TrainedModel, bytes: &[u8]) -> Result<Digest> {
    model.digest(bytes)
}

fn put_quantized(out: &mut Vec<u8>, v: &[f32]) {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi > lo { (hi - lo) / 255.0 } else { 0.0 };
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&scale.to_le_bytes());
    for &x in v {
        let q = if scale > 0.0 { ((x - lo) / scale).round().clamp(0.0, 255.0) as u8 } else { 0 };
        out.push(q);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Digest {
    pub fn embedding_size(&self) -> usize {
        self.h_g.len()
    }

    pub fn encode(&self, encoding: DigestEncoding) -> Vec<u8> {
        let e = self.h_g.len();
        let mut out = Vec::with_capacity(32 + 8 * e + 1024);
        out.extend_from_slice(DIGEST_MAGIC);
        out.extend_from_slice(&DIGEST_VERSION.to_le_bytes());
        out.extend_from_slice(&self.model_fingerprint);
        out.extend_from_slice(&self.file_length.to_le_bytes());
        out.push(encoding.flag());
        out.extend_from_slice(&(e as u32).to_le_bytes());
        for v in [&self.h_g, &self.h_d] {
            match encoding {
                DigestEncoding::Float32 => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                DigestEncoding::Quantized8 => put_quantized(&mut out, v),
            }
        }
        for r in &self.uneva.runs {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Digest> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != DIGEST_MAGIC {
            return Err(Error::format(0, "bad digest magic"));
        }
        let version = r.u16("version")?;
        if version != DIGEST_VERSION {
            return Err(Error::format(4, format!("unsupported digest version {version}")));
        }
        let model_fingerprint: [u8; 8] = r.take(8, "fingerprint")?.try_into().expect("8 bytes");
        let file_length = r.u64("file length")?;
        let enc_pos = r.pos;
        let encoding = match r.u8("encoding flag")? {
            0 => DigestEncoding::Float32,
            1 => DigestEncoding::Quantized8,
            other => return Err(Error::format(enc_pos, format!("unknown encoding flag {other}"))),
        };
        let e_pos = r.pos;
        let e = r.u32("embedding size")? as usize;
        if !(2..=1 << 20).contains(&e) {
            return Err(Error::format(e_pos, format!("implausible embedding size {e}")));
        }
        let read_vec = |r: &mut Reader<'_>| -> Result<Vec<f32>> {
            match encoding {
                DigestEncoding::Float32 => (0..e).map(|_| r.f32("embedding")).collect(),
                DigestEncoding::Quantized8 => {
                    let lo = r.f32("quantization offset")?;
                    let scale = r.f32("quantization scale")?;
                    Ok(r.take(e, "quantized embedding")?.iter().map(|&q| lo + f32::from(q) * scale).collect())
                }
            }
        };
        let h_g = read_vec(&mut r)?;
        let h_d = read_vec(&mut r)?;
        if let Some(i) = h_g.iter().chain(&h_d).position(|v| !v.is_finite()) {
            return Err(Error::format(e_pos + 4 + i * 4, "non-finite embedding value"));
        }
        let mut runs = [0u32; 256];
        for slot in runs.iter_mut() {
            *slot = r.u32("uneva")?;
        }
        if r.pos != buf.len() {
            return Err(Error::format(r.pos, "trailing bytes after digest"));
        }
        Ok(Digest {
            h_g,
            h_d,
            uneva: UnevaVector { runs },
            model_fingerprint,
            file_length,
        })
    }

    /// Base64 of the binary record, the CLI text form.
    pub fn to_text(&self, encoding: DigestEncoding) -> String {
        STANDARD.encode(self.encode(encoding))
    }

    pub fn from_text(text: &str) -> Result<Digest> {
        let raw = STANDARD
            .decode(text.trim())
            .map_err(|e| Error::format(0, format!("base64: {e}")))?;
        Digest::decode(&raw)
    }
}
