//! Embedding providers.

use crate::error::{invalid, Result};

/// Maps texts to fixed-dimension vectors.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Offline embedder: signed feature hashing of character trigrams.
///
/// Text is lowercased and every run of non-alphanumeric characters becomes one space
/// before hashing, so punctuation and layout do not move vectors.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    n: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 64, n: 3 }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim == 0 || n == 0 {
            return invalid("dimension and n-gram length must be positive");
        }
        Ok(Self { dim, n })
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut clean = String::with_capacity(text.len() + 2);
        clean.push(' ');
        for c in text.chars().flat_map(char::to_lowercase) {
            if c.is_alphanumeric() {
                clean.push(c);
            } else if !clean.ends_with(' ') {
                clean.push(' ');
            }
        }
        if !clean.ends_with(' ') {
            clean.push(' ');
        }
        let chars: Vec<char> = clean.chars().collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = [0u8; 4];
        for gram in chars.windows(self.n) {
            let mut h = FNV_OFFSET;
            for c in gram {
                for b in c.encode_utf8(&mut buf).bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
                }
            }
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        l2_normalize(&mut v);
        v
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl EmbeddingProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Scales `v` to unit length; the zero vector is left alone.
pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}
