//! Caption metrics over tokenized corpora: BLEU@4, ROUGE-L, an exact-match
//! METEOR variant and CIDEr, plus a slot for embedding-based scorers.
//!
//! All scores are reported on a 0-100 scale except CIDEr, which is the
//! mean n-gram TF-IDF cosine times 10.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::text::metric_tokens;

pub const BLEU_N: usize = 4;
pub const CIDER_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;
/// Alignment search nodes explored before settling for the best found.
pub const METEOR_SEARCH_BUDGET: usize = 200_000;

pub const METRIC_NAMES: [&str; 4] = ["bleu4", "meteor_lite", "rouge_l", "cider"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub sample_id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

impl EvalPair {
    pub fn new(sample_id: impl Into<String>, candidate: impl Into<String>, references: Vec<String>) -> Result<Self> {
        let p = Self {
            sample_id: sample_id.into(),
            candidate: candidate.into(),
            references,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(Error::validation(format!("{}: no references", self.sample_id)));
        }
        Ok(())
    }
}

struct Tokenized {
    cand: Vec<String>,
    refs: Vec<Vec<String>>,
}

fn tokenize(pairs: &[EvalPair]) -> Result<Vec<Tokenized>> {
    pairs
        .iter()
        .map(|p| {
            p.validate()?;
            Ok(Tokenized {
                cand: metric_tokens(&p.candidate),
                refs: p.references.iter().map(|r| metric_tokens(r)).collect(),
            })
        })
        .collect()
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram total for one pair.
fn clipped(cand: &[String], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let mut max_ref: Counts = BTreeMap::new();
    for r in refs {
        for (g, k) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(k);
        }
    }
    let hit = c.iter().map(|(g, k)| (*k).min(*max_ref.get(g).unwrap_or(&0))).sum();
    (hit, cand.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0)
}

fn bleu_from(hits: &[usize; BLEU_N], totals: &[usize; BLEU_N], c: usize, r: usize) -> f64 {
    if c == 0 || hits.iter().zip(totals).any(|(h, t)| *h == 0 || *t == 0) {
        return 0.0;
    }
    let log_p: f64 = hits.iter().zip(totals).map(|(h, t)| math::ln(*h as f64 / *t as f64)).sum::<f64>() / BLEU_N as f64;
    let bp = if c > r { 1.0 } else { math::exp(1.0 - r as f64 / c as f64) };
    100.0 * bp * math::exp(log_p)
}

fn bleu_tok(items: &[Tokenized]) -> f64 {
    let (mut hits, mut totals, mut c, mut r) = ([0; BLEU_N], [0; BLEU_N], 0, 0);
    for t in items {
        for n in 1..=BLEU_N {
            let (h, tot) = clipped(&t.cand, &t.refs, n);
            hits[n - 1] += h;
            totals[n - 1] += tot;
        }
        c += t.cand.len();
        r += closest_ref_len(t.cand.len(), &t.refs);
    }
    bleu_from(&hits, &totals, c, r)
}

/// Corpus BLEU@4 (clipped counts pooled over the corpus, brevity penalty
/// against the closest reference length), no smoothing, times 100.
pub fn bleu4(pairs: &[EvalPair]) -> Result<f64> {
    Ok(bleu_tok(&tokenize(pairs)?))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_pair(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            let l = lcs_len(cand, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / cand.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// LCS F-measure with β = 1.2, best reference per pair, corpus mean, × 100.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    let t = tokenize(pairs)?;
    Ok(mean(t.iter().map(|x| 100.0 * rouge_pair(&x.cand, &x.refs))))
}

/// Maximum-size exact unigram alignment with the fewest chunks.
/// Returns `(matches, chunks)`.
pub fn meteor_alignment(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for w in cand.iter().chain(reference) {
        let n = ids.len();
        ids.entry(w.as_str()).or_insert(n);
    }
    let c: Vec<usize> = cand.iter().map(|w| ids[w.as_str()]).collect();
    let r: Vec<usize> = reference.iter().map(|w| ids[w.as_str()]).collect();
    let mut cc = vec![0usize; ids.len()];
    let mut rc = vec![0usize; ids.len()];
    c.iter().for_each(|&w| cc[w] += 1);
    r.iter().for_each(|&w| rc[w] += 1);
    let skips: Vec<usize> = (0..ids.len()).map(|w| cc[w] - cc[w].min(rc[w])).collect();
    let matches: usize = (0..ids.len()).map(|w| cc[w].min(rc[w])).sum();
    if matches == 0 {
        return (0, 0);
    }
    let mut s = Search {
        c: &c,
        r: &r,
        used: vec![false; r.len()],
        skips,
        best: usize::MAX,
        nodes: 0,
    };
    s.go(0, None, 0);
    (matches, s.best)
}

struct Search<'a> {
    c: &'a [usize],
    r: &'a [usize],
    used: Vec<bool>,
    skips: Vec<usize>,
    best: usize,
    nodes: usize,
}

impl Search<'_> {
    /// `prev` is the reference position matched by candidate `i - 1`.
    fn go(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best {
            return;
        }
        if i == self.c.len() {
            self.best = chunks;
            return;
        }
        if self.nodes > METEOR_SEARCH_BUDGET && self.best != usize::MAX {
            return;
        }
        let w = self.c[i];
        // Extending the current chunk first makes the first leaf the greedy
        // alignment, so the budget cut-off still returns something sensible.
        let mut order: Vec<usize> = Vec::new();
        if let Some(p) = prev {
            if p + 1 < self.r.len() && self.r[p + 1] == w && !self.used[p + 1] {
                order.push(p + 1);
            }
        }
        order.extend((0..self.r.len()).filter(|&j| self.r[j] == w && !self.used[j] && Some(j) != prev.map(|p| p + 1)));
        for j in order {
            self.used[j] = true;
            let extends = prev == Some(j.wrapping_sub(1)) && j > 0;
            self.go(i + 1, Some(j), chunks + usize::from(!extends));
            self.used[j] = false;
        }
        if self.skips[w] > 0 {
            self.skips[w] -= 1;
            self.go(i + 1, None, chunks);
            self.skips[w] += 1;
        }
    }
}

fn meteor_pair(cand: &[String], refs: &[Vec<String>]) -> f64 {
    refs.iter()
        .map(|r| {
            let (m, chunks) = meteor_alignment(cand, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / cand.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let fmean = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
            let pen = METEOR_GAMMA * math::powf(chunks as f64 / m as f64, METEOR_BETA);
            fmean * (1.0 - pen)
        })
        .fold(0.0, f64::max)
}

/// Exact-match METEOR: harmonic mean weighted 9:1 towards recall, times a
/// fragmentation penalty `0.5 · (chunks / matches)^3`. No stemming or
/// synonym stages. Best reference per pair, corpus mean, × 100.
pub fn meteor_lite(pairs: &[EvalPair]) -> Result<f64> {
    let t = tokenize(pairs)?;
    Ok(mean(t.iter().map(|x| 100.0 * meteor_pair(&x.cand, &x.refs))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    pub corpus: f64,
    pub per_pair: Vec<f64>,
    /// Set when the corpus has a single pair and document frequencies were
    /// floored with add-one smoothing.
    pub idf_floored: bool,
}

fn cider_tok(items: &[Tokenized]) -> CiderScores {
    let n_docs = items.len();
    let floored = n_docs == 1;
    let mut df: [BTreeMap<&[String], usize>; CIDER_N] = Default::default();
    for t in items {
        for n in 1..=CIDER_N {
            let mut seen: BTreeSet<&[String]> = BTreeSet::new();
            for r in &t.refs {
                seen.extend(ngrams(r, n).into_keys());
            }
            for g in seen {
                *df[n - 1].entry(g).or_insert(0) += 1;
            }
        }
    }
    let log_n = if floored {
        math::ln((n_docs + 1) as f64)
    } else {
        math::ln(n_docs.max(1) as f64)
    };
    let vec_of = |tokens: &'_ [String], n: usize| -> Vec<(String, f64)> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(g, k)| {
                let idf = log_n - math::ln(df[n - 1].get(g).copied().unwrap_or(0).max(1) as f64);
                (g.join(" "), k as f64 * idf)
            })
            .collect()
    };
    let per_pair: Vec<f64> = items
        .iter()
        .map(|t| {
            let mut total = 0.0;
            for n in 1..=CIDER_N {
                let vc = vec_of(&t.cand, n);
                let nc = math::sqrt(vc.iter().map(|(_, v)| v * v).sum());
                let mut s = 0.0;
                for r in &t.refs {
                    let vr: BTreeMap<String, f64> = vec_of(r, n).into_iter().collect();
                    let nr = math::sqrt(vr.values().map(|v| v * v).sum());
                    if nc > 0.0 && nr > 0.0 {
                        let dot: f64 = vc.iter().map(|(g, v)| v * vr.get(g).copied().unwrap_or(0.0)).sum();
                        s += dot / (nc * nr);
                    }
                }
                total += s / t.refs.len() as f64;
            }
            10.0 * total / CIDER_N as f64
        })
        .collect();
    CiderScores {
        corpus: mean(per_pair.iter().copied()),
        per_pair,
        idf_floored: floored,
    }
}

/// TF-IDF n-gram cosine (n = 1..4) averaged over references and orders,
/// × 10, with document frequencies taken over each pair's reference set.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    Ok(cider_detailed(pairs)?.corpus)
}

pub fn cider_detailed(pairs: &[EvalPair]) -> Result<CiderScores> {
    Ok(cider_tok(&tokenize(pairs)?))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Similarity between a candidate and one reference, e.g. an embedding
/// model. Plugin errors never abort an evaluation.
pub trait EmbeddingScorer {
    fn name(&self) -> &str;
    fn score(&self, candidate: &str, reference: &str) -> core::result::Result<f64, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MetricValue {
    Score { value: f64 },
    Unavailable { reason: String },
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Score { value } => Some(*value),
            MetricValue::Unavailable { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, MetricValue>,
    pub per_sample: Vec<SampleScores>,
    pub pairs: usize,
    pub references: usize,
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn score(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).and_then(MetricValue::value)
    }

    /// Aligned two-column text table, built-in metrics first.
    pub fn to_table(&self) -> String {
        let mut names: Vec<&str> = METRIC_NAMES.iter().copied().filter(|n| self.metrics.contains_key(*n)).collect();
        names.extend(self.metrics.keys().map(String::as_str).filter(|n| !METRIC_NAMES.contains(n)));
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}  {}\n", "metric", "score");
        for n in names {
            let v = match &self.metrics[n] {
                MetricValue::Score { value } => format!("{value:>8.2}"),
                MetricValue::Unavailable { reason } => format!("unavailable ({reason})"),
            };
            out.push_str(&format!("{n:<width$}  {v}\n"));
        }
        out.push_str(&format!("{:<width$}  {}\n", "pairs", self.pairs));
        for f in &self.flags {
            out.push_str(&format!("note: {f}\n"));
        }
        out
    }
}

/// Runs the built-in metrics and every plugin.
pub fn evaluate(pairs: &[EvalPair], plugins: &[&dyn EmbeddingScorer]) -> Result<EvalReport> {
    let items = tokenize(pairs)?;
    let cider = cider_tok(&items);
    let mut per_sample = Vec::with_capacity(pairs.len());
    for (i, (p, t)) in pairs.iter().zip(&items).enumerate() {
        let mut scores = BTreeMap::new();
        scores.insert("bleu4".to_string(), bleu_tok(core::slice::from_ref(t)));
        scores.insert("meteor_lite".to_string(), 100.0 * meteor_pair(&t.cand, &t.refs));
        scores.insert("rouge_l".to_string(), 100.0 * rouge_pair(&t.cand, &t.refs));
        scores.insert("cider".to_string(), cider.per_pair[i]);
        per_sample.push(SampleScores {
            sample_id: p.sample_id.clone(),
            scores,
        });
    }
    let mut metrics = BTreeMap::new();
    let mean_of = |k: &str| mean(per_sample.iter().map(|s| s.scores[k]));
    metrics.insert("bleu4".to_string(), MetricValue::Score { value: bleu_tok(&items) });
    metrics.insert("meteor_lite".to_string(), MetricValue::Score { value: mean_of("meteor_lite") });
    metrics.insert("rouge_l".to_string(), MetricValue::Score { value: mean_of("rouge_l") });
    metrics.insert("cider".to_string(), MetricValue::Score { value: cider.corpus });
    let mut flags = Vec::new();
    if cider.idf_floored {
        flags.push("cider: single-pair corpus, document frequencies floored with add-one".to_string());
    }
    for plugin in plugins {
        let name = plugin.name().to_string();
        let mut per = Vec::with_capacity(pairs.len());
        let mut failure = None;
        'pairs: for p in pairs {
            let mut best = f64::NEG_INFINITY;
            for r in &p.references {
                match plugin.score(&p.candidate, r) {
                    Ok(v) if v.is_finite() => best = best.max(v),
                    Ok(v) => {
                        failure = Some(format!("non-finite score {v}"));
                        break 'pairs;
                    }
                    Err(e) => {
                        failure = Some(e);
                        break 'pairs;
                    }
                }
            }
            per.push(best);
        }
        let value = match failure {
            Some(reason) => {
                log::warn!("metric plugin {name} unavailable: {reason}");
                MetricValue::Unavailable { reason }
            }
            None => {
                for (s, v) in per_sample.iter_mut().zip(&per) {
                    s.scores.insert(name.clone(), *v);
                }
                MetricValue::Score {
                    value: mean(per.into_iter()),
                }
            }
        };
        metrics.insert(name, value);
    }
    Ok(EvalReport {
        metrics,
        per_sample,
        pairs: pairs.len(),
        references: pairs.iter().map(|p| p.references.len()).sum(),
        flags,
    })
}

#[cfg(test)]
mod tests;
