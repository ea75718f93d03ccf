mod common;

use common::oracles::{all_strings, edit_brute, lcs_brute};
use peftlab::metrics::{
    edit_distance, lcs_len, rouge_l, rouge_n, rouge_s, tokenize, wer, TokenSequence, TokenizeConfig,
};
use proptest::prelude::*;

#[test]
fn lcs_matches_exhaustive_subsequence_search() {
    let strings = all_strings(6);
    for a in &strings {
        for b in &strings {
            assert_eq!(lcs_len(a, b), lcs_brute(a, b), "{a:?} / {b:?}");
        }
    }
}

#[test]
fn wer_counts_match_brute_force_edit_scripts() {
    let strings = all_strings(5);
    let refs: Vec<_> = strings.iter().filter(|s| !s.is_empty()).collect();
    for r in &refs {
        for h in &strings {
            let rt = TokenSequence::new(r.iter().cloned()).unwrap();
            let ht = TokenSequence::new(h.iter().cloned()).unwrap();
            let res = wer(&rt, &ht).unwrap();
            let best = edit_brute(r, h);
            assert_eq!(res.edits(), best, "{r:?} / {h:?}");
            assert_eq!(edit_distance(r, h), best);
            // the split must describe a real alignment
            assert_eq!(r.len() - res.deletions + res.insertions, h.len());
            assert!(res.substitutions + res.deletions <= r.len());
        }
    }
}

#[test]
fn wer_may_exceed_one() {
    let r = wer(&TokenSequence::words("a"), &TokenSequence::words("x y")).unwrap();
    assert_eq!(r.score, 2.0);
    assert_eq!((r.substitutions, r.deletions, r.insertions), (1, 0, 1));
}

#[test]
fn hand_examples_through_tokenizer() {
    let tok = TokenizeConfig::default();
    let t = |s: &str| tokenize(s, &tok);
    assert_eq!(rouge_n(&t("The cat sat."), &[t("the cat sat")], 1).unwrap(), 1.0);
    assert_eq!(rouge_n(&t("a b c"), &[t("a b d")], 2).unwrap(), 0.5);
    assert_eq!(rouge_l(&t("a c e"), &t("a b c d e")).unwrap(), 0.6);
    assert_eq!(rouge_s(&t("a b c"), &[t("a c b")]).unwrap(), 2.0 / 3.0);
}

fn tokens() -> impl Strategy<Value = TokenSequence> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..10)
        .prop_map(|v| TokenSequence::new(v).unwrap())
}

proptest! {
    #[test]
    fn scores_are_bounded(c in tokens(), r1 in tokens(), r2 in tokens(), n in 1usize..4) {
        let refs = [r1.clone(), r2];
        for s in [rouge_n(&c, &refs, n).unwrap(), rouge_s(&c, &refs).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&s));
        }
        if !r1.is_empty() {
            let l = rouge_l(&c, &r1).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
            prop_assert!(wer(&r1, &c).unwrap().score >= 0.0);
        }
    }

    #[test]
    fn identical_candidate_scores_perfectly(r in tokens()) {
        prop_assume!(r.len() >= 2);
        prop_assert_eq!(rouge_n(&r, std::slice::from_ref(&r), 2).unwrap(), 1.0);
        prop_assert_eq!(rouge_l(&r, &r).unwrap(), 1.0);
        prop_assert_eq!(rouge_s(&r, std::slice::from_ref(&r)).unwrap(), 1.0);
        prop_assert_eq!(wer(&r, &r).unwrap().score, 0.0);
    }
}
