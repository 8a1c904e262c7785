//! Text embedders.
//!
//! [`HashedNgramEmbedder`] is the deterministic offline embedder: lower-cased
//! text is padded with `#` on both sides, cut into character trigrams, and the
//! trigram counts are hashed (FNV-1a) into a fixed number of buckets, then
//! L2-normalised. It needs no model and gives bit-identical vectors everywhere.

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding backend unavailable: {0}")]
    Unavailable(String),
}

pub trait Embedder: Send + Sync {
    /// One unit-norm vector per input text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError>;

    fn embed_one(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.embed(&[text])?.remove(0))
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        (**self).embed(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        (**self).embed(texts)
    }
}

pub const DEFAULT_DIM: usize = 4096;
const NGRAM: usize = 3;

#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    dim: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        HashedNgramEmbedder { dim: DEFAULT_DIM }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Character trigrams of `#text#` after lower-casing and trimming.
pub fn char_ngrams(text: &str) -> Vec<String> {
    let padded: Vec<char> = std::iter::once('#')
        .chain(text.trim().to_lowercase().chars())
        .chain(std::iter::once('#'))
        .collect();
    if padded.len() < NGRAM {
        return vec![padded.iter().collect()];
    }
    padded.windows(NGRAM).map(|w| w.iter().collect()).collect()
}

impl HashedNgramEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedNgramEmbedder { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn vector(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut v = vec![0.0; self.dim];
        for gram in char_ngrams(text) {
            v[(fnv1a(gram.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        normalize(&mut v);
        Ok(v)
    }
}

impl Embedder for HashedNgramEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts.iter().map(|t| self.vector(t)).collect()
    }
}

pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Memoises another embedder so repeated strings are embedded once.
pub struct MemoEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<E: Embedder> MemoEmbedder<E> {
    pub fn new(inner: E) -> Self {
        MemoEmbedder { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("embedding cache poisoned").len()
    }
}

impl<E: Embedder> Embedder for MemoEmbedder<E> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let missing: Vec<&str> = {
            let cache = self.cache.lock().expect("embedding cache poisoned");
            let mut seen = std::collections::HashSet::new();
            texts.iter().copied().filter(|t| !cache.contains_key(*t) && seen.insert(*t)).collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            let mut cache = self.cache.lock().expect("embedding cache poisoned");
            for (t, v) in missing.into_iter().zip(fresh) {
                cache.insert(t.to_string(), v);
            }
        }
        let cache = self.cache.lock().expect("embedding cache poisoned");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}
