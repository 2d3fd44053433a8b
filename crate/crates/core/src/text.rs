//! Text normalisation, metric tokenisation and deterministic text features.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Lowercase, collapse runs of whitespace, trim.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for word in lower.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Lowercased word tokens with every punctuation character split out as its
/// own token.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                tokens.push(core::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() || ch == '\'' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                tokens.push(core::mem::take(&mut cur));
            }
            tokens.push(String::from(ch));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Maps text to a fixed-size feature vector (stand-in for a frozen text
/// backbone).
pub trait TextFeaturizer {
    fn dim(&self) -> usize;
    fn featurize(&self, text: &str) -> Vec<f64>;
}

pub fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature hashing of unigrams and bigrams, L2-normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingFeaturizer {
    pub dim: usize,
    pub seed: u64,
}

impl HashingFeaturizer {
    const PROBES: u64 = 4;

    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn add_gram(&self, gram: &str, weight: f64, out: &mut [f64]) {
        for probe in 0..Self::PROBES {
            let h = fnv1a(gram.as_bytes(), self.seed.wrapping_add(probe));
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            out[idx] += sign * weight;
        }
    }
}

impl TextFeaturizer for HashingFeaturizer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn featurize(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let words: Vec<String> = metric_tokens(text)
            .into_iter()
            .filter(|w| w.chars().any(char::is_alphanumeric))
            .collect();
        for w in &words {
            self.add_gram(w, 1.0, &mut out);
        }
        for pair in words.windows(2) {
            let mut bigram = pair[0].clone();
            bigram.push(' ');
            bigram.push_str(&pair[1]);
            self.add_gram(&bigram, 0.5, &mut out);
        }
        let n = math::norm(&out);
        if n > 0.0 {
            out.iter_mut().for_each(|v| *v /= n);
        }
        out
    }
}

/// Lookup table of precomputed features with a fallback featurizer for
/// unseen texts.
#[derive(Debug, Clone)]
pub struct TableFeaturizer<F> {
    pub table: BTreeMap<String, Vec<f64>>,
    pub fallback: F,
}

impl<F: TextFeaturizer> TextFeaturizer for TableFeaturizer<F> {
    fn dim(&self) -> usize {
        self.fallback.dim()
    }

    fn featurize(&self, text: &str) -> Vec<f64> {
        match self.table.get(text) {
            Some(v) => v.clone(),
            None => self.fallback.featurize(text),
        }
    }
}
