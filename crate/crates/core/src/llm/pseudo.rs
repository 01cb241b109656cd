//! Deterministic offline embedder.
//!
//! Signed feature hashing over lowercase word unigrams and character
//! trigrams, plus a small signature derived from the exact input string so
//! that distinct inputs never map to parallel vectors. Output is L2
//! normalized.

use sha2::{Digest, Sha256};

use crate::bank::EmbeddingVector;

pub const DEFAULT_DIM: usize = 256;

const WORD_WEIGHT: f64 = 1.0;
const TRIGRAM_WEIGHT: f64 = 0.5;
const SIGNATURE_WEIGHT: f64 = 0.25;
const SIGNATURE_FEATURES: usize = 8;

#[derive(Clone, Debug)]
pub struct PseudoEmbedder {
    dim: usize,
}

impl Default for PseudoEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

impl PseudoEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= SIGNATURE_FEATURES, "pseudo embedding dim too small");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self) -> String {
        format!("pseudo-v1-{}", self.dim)
    }

    fn add_feature(&self, out: &mut [f64], kind: &[u8], feature: &[u8], weight: f64) {
        let d = digest(&[kind, feature]);
        let bucket = u64::from_le_bytes(d[..8].try_into().unwrap()) as usize % self.dim;
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        out[bucket] += sign * weight;
    }

    /// Embed `text`; `None` for empty input.
    pub fn embed(&self, text: &str) -> Option<EmbeddingVector> {
        if text.is_empty() {
            return None;
        }
        let mut out = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            self.add_feature(&mut out, b"w", word.as_bytes(), WORD_WEIGHT);
        }
        let chars: Vec<char> = format!(" {lower} ").chars().collect();
        for tri in chars.windows(3) {
            let s: String = tri.iter().collect();
            self.add_feature(&mut out, b"t", s.as_bytes(), TRIGRAM_WEIGHT);
        }
        let sig = digest(&[b"s", text.as_bytes()]);
        for i in 0..SIGNATURE_FEATURES {
            let bucket = u32::from_le_bytes(sig[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
            let magnitude = 0.5 + f64::from(sig[(i * 4 + 1) % 32]) / 255.0;
            let sign = if sig[(i * 4 + 2) % 32] & 1 == 0 { 1.0 } else { -1.0 };
            out[bucket % self.dim] += sign * magnitude * SIGNATURE_WEIGHT;
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Every feature cancelled out; fall back to the signature bucket.
            out[sig[0] as usize % self.dim] = 1.0;
        } else {
            out.iter_mut().for_each(|x| *x /= norm);
        }
        EmbeddingVector::new(out).ok()
    }
}
