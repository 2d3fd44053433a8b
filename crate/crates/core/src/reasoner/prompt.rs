//! Hypothesis-augmented prompt construction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::hypothesis::{render_masked_events, HypothesisSet};
use crate::tokenizer::Tokenizer;

pub const REASONER_TEMPLATE: &str = include_str!("../../prompts/reasoner.v1.txt");
pub const DEFAULT_QUERY: &str = "what happens in the hidden event?";

/// Prompt text: instruction, numbered captions with the mask marker, the
/// top-k hypotheses in descending score order (omitted when there are none),
/// then the query.
pub fn prompt_text(query: &str, captions: &[String], mask_index: usize, topk: &HypothesisSet) -> String {
    let mut hyps: Vec<(usize, &str, f64)> = topk
        .hypotheses
        .iter()
        .enumerate()
        .map(|(i, h)| (i, h.text.as_str(), h.score.unwrap_or(f64::NEG_INFINITY)))
        .collect();
    hyps.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut section = String::new();
    if !hyps.is_empty() {
        section.push_str("candidate hypotheses:\n");
        for (n, (_, text, _)) in hyps.iter().enumerate() {
            section.push_str(&format!("{}. {text}\n", n + 1));
        }
    }
    REASONER_TEMPLATE
        .replace("{events}", &render_masked_events(captions, mask_index))
        .replace("{hypotheses}", &section)
        .replace("{query}", query)
}

pub fn build_prompt(
    tokenizer: &Tokenizer,
    query: &str,
    captions: &[String],
    mask_index: usize,
    topk: &HypothesisSet,
) -> Vec<u32> {
    tokenizer.encode(&prompt_text(query, captions, mask_index, topk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::Provenance;
    use alloc::string::ToString;
    use alloc::vec;

    fn caps() -> Vec<String> {
        vec!["crack eggs".to_string(), "serve omelette".to_string()]
    }

    #[test]
    fn empty_topk_omits_section() {
        let t = prompt_text(DEFAULT_QUERY, &caps(), 1, &HypothesisSet::new("s"));
        assert!(!t.contains("candidate hypotheses"));
        assert!(t.contains("1. crack eggs\n2. [MASK]\n3. serve omelette"));
        assert!(t.ends_with(&format!("question: {DEFAULT_QUERY}\n")));
    }

    #[test]
    fn hypotheses_listed_by_score() {
        let mut set = HypothesisSet::new("s");
        set.push("fry eggs", Provenance::Candidate, Some(0.2)).unwrap();
        set.push("whisk eggs", Provenance::Candidate, Some(0.9)).unwrap();
        set.push("boil eggs", Provenance::Candidate, Some(0.5)).unwrap();
        let t = prompt_text("q", &caps(), 1, &set);
        assert!(t.contains("candidate hypotheses:\n1. whisk eggs\n2. boil eggs\n3. fry eggs\n"));
        let tok = Tokenizer::train([t.as_str()], 300);
        assert_eq!(build_prompt(&tok, "q", &caps(), 1, &set), build_prompt(&tok, "q", &caps(), 1, &set));
    }
}
