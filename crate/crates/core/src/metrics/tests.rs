use super::*;
use proptest::prelude::*;
use std::collections::HashMap;

fn pair(id: &str, c: &str, refs: &[&str]) -> EvalPair {
    EvalPair::new(id, c, refs.iter().map(|s| s.to_string()).collect()).unwrap()
}

fn fixture() -> Vec<EvalPair> {
    vec![
        pair("a", "the man cuts the onion on a board.", &["a man cuts an onion on the board.", "the man slices onions"]),
        pair("b", "she pours water into the pot", &["she pours the water into a pot", "water is poured into the pot"]),
        pair("c", "the dog runs after the ball", &["a dog chases the ball across the yard"]),
        pair("d", "he opens the door and walks in", &["the man opens the door and walks inside", "he walks in"]),
        pair("e", "they fry the onion in the pan", &["the onion is fried in the pan", "they fry onions in a pan"]),
    ]
}

fn toks(s: &str) -> Vec<String> {
    metric_tokens(s)
}

// Straightforward re-derivations on joined-string keys.

fn grams(t: &[String], n: usize) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for i in 0..t.len().saturating_sub(n - 1) {
        if i + n <= t.len() {
            *m.entry(t[i..i + n].join(" ")).or_insert(0) += 1;
        }
    }
    m
}

fn oracle_bleu(pairs: &[EvalPair]) -> f64 {
    let mut num = [0f64; 4];
    let mut den = [0f64; 4];
    let (mut c, mut r) = (0f64, 0f64);
    for p in pairs {
        let cand = toks(&p.candidate);
        let refs: Vec<Vec<String>> = p.references.iter().map(|s| toks(s)).collect();
        for n in 1..=4 {
            let cg = grams(&cand, n);
            for (g, k) in &cg {
                let m = refs.iter().map(|r| *grams(r, n).get(g).unwrap_or(&0)).max().unwrap();
                num[n - 1] += (*k).min(m) as f64;
                den[n - 1] += *k as f64;
            }
        }
        c += cand.len() as f64;
        let mut lens: Vec<usize> = refs.iter().map(|r| r.len()).collect();
        lens.sort();
        let best = lens.iter().min_by(|a, b| {
            let da = (**a as f64 - cand.len() as f64).abs();
            let db = (**b as f64 - cand.len() as f64).abs();
            da.partial_cmp(&db).unwrap()
        });
        r += *best.unwrap() as f64;
    }
    let geo = (0..4).map(|i| (num[i] / den[i]).ln()).sum::<f64>() / 4.0;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * geo.exp()
}

fn is_subseq(sub: &[&String], s: &[String]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|x| it.any(|y| y == *x))
}

fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if sub.len() > best && is_subseq(&sub, long) {
            best = sub.len();
        }
    }
    best
}

fn oracle_rouge(pairs: &[EvalPair]) -> f64 {
    let b2 = 1.2f64 * 1.2;
    let mut total = 0.0;
    for p in pairs {
        let cand = toks(&p.candidate);
        let mut best = 0f64;
        for r in &p.references {
            let r = toks(r);
            let l = brute_lcs(&cand, &r) as f64;
            if l > 0.0 {
                let (pr, rc) = (l / cand.len() as f64, l / r.len() as f64);
                best = best.max((1.0 + b2) * pr * rc / (rc + b2 * pr));
            }
        }
        total += best;
    }
    100.0 * total / pairs.len() as f64
}

/// Every injective exact-match alignment; returns (max matches, min chunks
/// among those).
fn brute_alignment(c: &[String], r: &[String]) -> (usize, usize) {
    fn rec(i: usize, c: &[String], r: &[String], used: &mut Vec<bool>, map: &mut Vec<Option<usize>>, best: &mut (usize, usize)) {
        if i == c.len() {
            let m = map.iter().flatten().count();
            let mut chunks = 0;
            for k in 0..c.len() {
                if let Some(j) = map[k] {
                    let cont = k > 0 && j > 0 && map[k - 1] == Some(j - 1);
                    if !cont {
                        chunks += 1;
                    }
                }
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        map.push(None);
        rec(i + 1, c, r, used, map, best);
        map.pop();
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                map.push(Some(j));
                rec(i + 1, c, r, used, map, best);
                map.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    rec(0, c, r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    best
}

fn oracle_meteor(pairs: &[EvalPair]) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        let cand = toks(&p.candidate);
        let mut best = 0f64;
        for r in &p.references {
            let r = toks(r);
            let (m, ch) = brute_alignment(&cand, &r);
            if m > 0 {
                let (pr, rc) = (m as f64 / cand.len() as f64, m as f64 / r.len() as f64);
                let f = 10.0 * pr * rc / (rc + 9.0 * pr);
                best = best.max(f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3)));
            }
        }
        total += best;
    }
    100.0 * total / pairs.len() as f64
}

fn oracle_cider(pairs: &[EvalPair]) -> f64 {
    let n_docs = pairs.len() as f64;
    let mut total = 0.0;
    let mut df: Vec<HashMap<String, f64>> = vec![HashMap::new(); 4];
    for p in pairs {
        for n in 1..=4 {
            let mut set = std::collections::HashSet::new();
            for r in &p.references {
                set.extend(grams(&toks(r), n).into_keys());
            }
            for g in set {
                *df[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    for p in pairs {
        let mut s = 0.0;
        for n in 1..=4 {
            let w = |t: &[String]| -> HashMap<String, f64> {
                grams(t, n)
                    .into_iter()
                    .map(|(g, k)| {
                        let d = df[n - 1].get(&g).copied().unwrap_or(0.0).max(1.0);
                        let v = k as f64 * (n_docs / d).ln();
                        (g, v)
                    })
                    .collect()
            };
            let vc = w(&toks(&p.candidate));
            let mut acc = 0.0;
            for r in &p.references {
                let vr = w(&toks(r));
                let dot: f64 = vc.iter().map(|(g, v)| v * vr.get(g).unwrap_or(&0.0)).sum();
                let nc = vc.values().map(|v| v * v).sum::<f64>().sqrt();
                let nr = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    acc += dot / (nc * nr);
                }
            }
            s += acc / p.references.len() as f64;
        }
        total += 10.0 * s / 4.0;
    }
    total / n_docs
}

#[test]
fn bleu_matches_oracle() {
    let f = fixture();
    let got = bleu4(&f).unwrap();
    let want = oracle_bleu(&f);
    assert!(got > 0.0);
    assert!((got - want).abs() < 1e-4, "{got} vs {want}");
}

#[test]
fn bleu_hand_example() {
    // p1 = 5/6, p2 = 3/5, p3 = 2/4, p4 = 1/3, equal lengths.
    let p = [pair("x", "the cat sat on the mat", &["the cat sat on a mat"])];
    let want = 100.0 * (1.0f64 / 12.0).powf(0.25);
    assert!((bleu4(&p).unwrap() - want).abs() < 1e-9);
    // No shared trigram: zero without smoothing.
    let p = [pair("x", "a b c d", &["a b x d"])];
    assert_eq!(bleu4(&p).unwrap(), 0.0);
    // 7 tokens, one substitution at the end: p = 6/7, 5/6, 4/5, 3/4, no
    // brevity penalty.
    let p = [pair("x", "a b c d e f g", &["a b c d e f h"])];
    let want = 100.0 * ((6.0 / 7.0) * (5.0 / 6.0) * (4.0 / 5.0) * (3.0 / 4.0f64)).powf(0.25);
    assert!((bleu4(&p).unwrap() - want).abs() < 1e-9);
}

#[test]
fn bleu_brevity_penalty() {
    let p = [pair("x", "a b c d", &["a b c d e f g h"])];
    let want = 100.0 * (1.0f64 - 2.0).exp();
    assert!((bleu4(&p).unwrap() - want).abs() < 1e-9);
}

#[test]
fn rouge_matches_oracle() {
    let f = fixture();
    let got = rouge_l(&f).unwrap();
    let want = oracle_rouge(&f);
    assert!((got - want).abs() < 1e-4, "{got} vs {want}");
}

#[test]
fn meteor_matches_oracle() {
    let f = fixture();
    let got = meteor_lite(&f).unwrap();
    let want = oracle_meteor(&f);
    assert!((got - want).abs() < 1e-3, "{got} vs {want}");
}

#[test]
fn meteor_alignment_prefers_fewer_chunks() {
    // Greedy left-to-right would take the first "the" and split into 3 chunks.
    let c = toks("the cat the dog");
    let r = toks("the dog the cat");
    assert_eq!(meteor_alignment(&c, &r), brute_alignment(&c, &r));
    assert_eq!(meteor_alignment(&c, &r), (4, 2));
}

#[test]
fn cider_matches_oracle() {
    let f = fixture();
    let got = cider(&f).unwrap();
    let want = oracle_cider(&f);
    assert!(got > 0.0);
    assert!((got - want).abs() < 1e-3, "{got} vs {want}");
}

#[test]
fn identical_corpus_maxima() {
    let p: Vec<EvalPair> = ["a man cuts the onion", "she pours water into a pot", "the dog runs after the ball"]
        .iter()
        .enumerate()
        .map(|(i, s)| pair(&i.to_string(), s, &[s]))
        .collect();
    assert_eq!(bleu4(&p).unwrap(), 100.0);
    assert_eq!(rouge_l(&p).unwrap(), 100.0);
    assert!((cider(&p).unwrap() - 10.0).abs() < 1e-12);
    // METEOR keeps a small fragmentation penalty even on a perfect match.
    let m = meteor_lite(&p).unwrap();
    assert!(m > 95.0 && m < 100.0);
}

#[test]
fn single_pair_cider_is_floored_and_flagged() {
    let p = [pair("x", "a man cuts the onion", &["a man cuts the onion"])];
    let d = cider_detailed(&p).unwrap();
    assert!(d.idf_floored);
    assert!((d.corpus - 10.0).abs() < 1e-12);
    let rep = evaluate(&p, &[]).unwrap();
    assert_eq!(rep.flags.len(), 1);
}

#[test]
fn disjoint_corpus_is_zero() {
    let p = [pair("x", "alpha beta gamma delta", &["one two three four"]), pair("y", "red green", &["blue yellow"])];
    assert_eq!(bleu4(&p).unwrap(), 0.0);
    assert_eq!(rouge_l(&p).unwrap(), 0.0);
    assert_eq!(meteor_lite(&p).unwrap(), 0.0);
    assert_eq!(cider(&p).unwrap(), 0.0);
}

#[test]
fn empty_candidate_scores_zero() {
    let p = [pair("x", "", &["a b c d"]), pair("y", "a b c d", &["a b c d"])];
    let rep = evaluate(&p, &[]).unwrap();
    assert_eq!(rep.per_sample[0].scores["rouge_l"], 0.0);
    assert_eq!(rep.per_sample[0].scores["meteor_lite"], 0.0);
    assert_eq!(rep.per_sample[0].scores["cider"], 0.0);
}

#[test]
fn references_required() {
    assert!(EvalPair::new("x", "a", vec![]).is_err());
}

struct Fixed(f64);
impl EmbeddingScorer for Fixed {
    fn name(&self) -> &str {
        "bert_s"
    }
    fn score(&self, _: &str, _: &str) -> core::result::Result<f64, String> {
        Ok(self.0)
    }
}

struct Broken;
impl EmbeddingScorer for Broken {
    fn name(&self) -> &str {
        "broken"
    }
    fn score(&self, _: &str, _: &str) -> core::result::Result<f64, String> {
        Err("no weights".into())
    }
}

#[test]
fn evaluate_reports_builtins_and_plugins() {
    let f = fixture();
    let rep = evaluate(&f, &[]).unwrap();
    assert_eq!(rep.metrics.len(), 4);
    assert_eq!(rep.per_sample.len(), 5);
    assert_eq!(rep.references, 9);
    assert!((rep.score("cider").unwrap() - cider(&f).unwrap()).abs() < 1e-12);

    let rep = evaluate(&f, &[&Fixed(0.7), &Broken]).unwrap();
    assert_eq!(rep.metrics.len(), 6);
    assert_eq!(rep.score("bert_s"), Some(0.7));
    assert!(matches!(rep.metrics["broken"], MetricValue::Unavailable { .. }));
    assert_eq!(rep.metrics.values().filter(|v| v.value().is_some()).count(), 5);
    assert!(rep.to_table().contains("unavailable (no weights)"));
    assert_eq!(rep, evaluate(&f, &[&Fixed(0.7), &Broken]).unwrap());
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    let sent = prop::collection::vec(0u8..6, 0..7);
    prop::collection::vec((sent.clone(), sent), 1..6)
}

fn to_pairs(c: &[(Vec<u8>, Vec<u8>)]) -> Vec<EvalPair> {
    let words = ["a", "man", "cuts", "the", "onion", "dog"];
    let s = |v: &[u8]| v.iter().map(|&i| words[i as usize]).collect::<Vec<_>>().join(" ");
    c.iter()
        .enumerate()
        .map(|(i, (a, b))| EvalPair::new(i.to_string(), s(a), vec![s(b)]).unwrap())
        .collect()
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant(c in corpus(), rot in 0usize..6) {
        let p = to_pairs(&c);
        let mut q = p.clone();
        let k = rot % q.len();
        q.rotate_left(k);
        q.reverse();
        for f in [bleu4, rouge_l, meteor_lite, cider] {
            prop_assert!((f(&p).unwrap() - f(&q).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn appending_reference_fragment_keeps_lcs(c in corpus(), a in 0usize..7, b in 0usize..7) {
        for (cand, reference) in to_pairs(&c).iter().map(|p| (toks(&p.candidate), toks(&p.references[0]))) {
            let (lo, hi) = (a.min(b).min(reference.len()), a.max(b).min(reference.len()));
            let mut longer = cand.clone();
            longer.extend_from_slice(&reference[lo..hi]);
            prop_assert!(lcs_len(&longer, &reference) >= lcs_len(&cand, &reference));
            prop_assert_eq!(lcs_len(&cand, &reference), brute_lcs(&cand, &reference));
        }
    }

    #[test]
    fn alignment_is_optimal(c in prop::collection::vec(0u8..4, 0..7), r in prop::collection::vec(0u8..4, 0..7)) {
        let w = |v: &[u8]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>();
        let (c, r) = (w(&c), w(&r));
        prop_assert_eq!(meteor_alignment(&c, &r), brute_alignment(&c, &r));
    }

    #[test]
    fn scores_stay_in_range(c in corpus()) {
        let p = to_pairs(&c);
        for f in [bleu4, rouge_l, meteor_lite] {
            let v = f(&p).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
        }
        let v = cider(&p).unwrap();
        prop_assert!((-1e-9..=10.0 + 1e-9).contains(&v));
    }
}
