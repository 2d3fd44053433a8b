//! Byte-level BPE tokenizer with a merge table learned from a corpus.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const BYTE_OFFSET: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    ranks: BTreeMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

fn words(text: &str) -> impl Iterator<Item = Vec<u8>> + '_ {
    text.split_whitespace().map(|w| {
        let mut v = Vec::with_capacity(w.len() + 1);
        v.push(b' ');
        v.extend_from_slice(w.as_bytes());
        v
    })
}

fn merge_pair(seq: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

impl Tokenizer {
    fn base_pieces() -> Vec<Vec<u8>> {
        let mut pieces = vec![Vec::new(), Vec::new(), Vec::new()];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        pieces
    }

    /// Learns up to `vocab_size - 259` merges; stops early once no pair
    /// occurs at least twice.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Self {
        let mut counts: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut seqs: Vec<(Vec<u32>, usize)> = counts
            .into_iter()
            .map(|(w, c)| (w.iter().map(|b| *b as u32 + BYTE_OFFSET).collect(), c))
            .collect();
        let mut tok = Self {
            merges: Vec::new(),
            ranks: BTreeMap::new(),
            pieces: Self::base_pieces(),
        };
        while tok.pieces.len() < vocab_size {
            let mut pairs: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for (s, c) in &seqs {
                for w in s.windows(2) {
                    *pairs.entry((w[0], w[1])).or_default() += c;
                }
            }
            // highest count, ties to the smallest pair
            let Some((&best, &count)) = pairs.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                break;
            };
            if count < 2 {
                break;
            }
            let id = tok.push_merge(best);
            for (s, _) in &mut seqs {
                *s = merge_pair(s, best, id);
            }
        }
        tok
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.pieces.len() as u32;
        let mut piece = self.pieces[pair.0 as usize].clone();
        piece.extend_from_slice(&self.pieces[pair.1 as usize]);
        self.pieces.push(piece);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in words(text) {
            let mut seq: Vec<u32> = w.iter().map(|b| *b as u32 + BYTE_OFFSET).collect();
            loop {
                let best = seq
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|r| (*r, (p[0], p[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                seq = merge_pair(&seq, pair, BYTE_OFFSET + 256 + rank);
            }
            out.extend(seq);
        }
        out
    }

    /// Decodes ids back to text; special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(p) = self.pieces.get(id as usize) {
                bytes.extend_from_slice(p);
            }
        }
        let s = String::from_utf8_lossy(&bytes);
        String::from(s.trim_start())
    }

    /// One merge per line: `left right`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# bpe merges v1\n");
        for (a, b) in &self.merges {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tok = Self {
            merges: Vec::new(),
            ranks: BTreeMap::new(),
            pieces: Self::base_pieces(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<u32>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) if (a as usize) < tok.pieces.len() && (b as usize) < tok.pieces.len() => {
                    tok.push_merge((a, b));
                }
                _ => return Err(Error::validation(format!("tokenizer line {}: `{line}`", n + 1))),
            }
        }
        Ok(tok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_text() {
        let corpus = ["the man cuts the tomato", "the man serves the tomato soup", "a dog catches the frisbee"];
        let tok = Tokenizer::train(corpus.iter().copied(), 320);
        for t in corpus {
            assert_eq!(tok.decode(&tok.encode(t)), t);
        }
        assert_eq!(tok.decode(&tok.encode("unseen wörds ok")), "unseen wörds ok");
        assert!(tok.encode("the tomato").len() < "the tomato".len());
    }

    #[test]
    fn persists_merges() {
        let tok = Tokenizer::train(["aa aa aa bb bb"].iter().copied(), 300);
        let back = Tokenizer::from_text(&tok.to_text()).unwrap();
        assert_eq!(tok, back);
        assert!(Tokenizer::from_text("1 x").is_err());
    }

    #[test]
    fn specials_are_skipped_in_decode() {
        let tok = Tokenizer::train(["hi"].iter().copied(), 260);
        let mut ids = vec![BOS];
        ids.extend(tok.encode("hi"));
        ids.push(EOS);
        assert_eq!(tok.decode(&ids), "hi");
    }
}
