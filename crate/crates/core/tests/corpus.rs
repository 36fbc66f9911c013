use csgan::corpus::{synth_text, Lang, Origin, SynthConfig, Vocabulary, NUM_SPECIALS, UNK};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[test]
fn min_count_drops_exactly_the_rare_tokens() {
    let mut text = synth_text(11, 1000, &SynthConfig::default()).unwrap();
    text.matrix.push("m_rare_a m_rare_b m_rare_b".into());
    text.real_cs.push("e_rare_c m_rare_a".into());
    let vocab = Vocabulary::build(&text.matrix, &text.embedded, &text.real_cs, 2).unwrap();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in text
        .matrix
        .iter()
        .chain(&text.embedded)
        .chain(&text.real_cs)
    {
        for tok in line.split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    assert!(
        counts.values().any(|&c| c < 2),
        "corpus should contain rare tokens for this check"
    );
    for (tok, c) in &counts {
        assert_eq!(vocab.id(tok).is_some(), *c >= 2, "{tok} seen {c} times");
    }
    assert_eq!(
        vocab.size(),
        NUM_SPECIALS + counts.values().filter(|&&c| c >= 2).count()
    );
}

#[test]
fn tags_recover_the_generating_language() {
    let cfg = SynthConfig::default();
    let text = synth_text(5, 300, &cfg).unwrap();
    let vocab = Vocabulary::build(&text.matrix, &text.embedded, &text.real_cs, 1).unwrap();
    let set =
        csgan::corpus::CorpusSet::encode(&vocab, &text.matrix, &text.embedded, &text.real_cs, 45);
    for r in set.matrix.iter().chain(&set.embedded).chain(&set.real_cs) {
        for (&id, &tag) in r.ids.iter().zip(&r.tags) {
            let tok = vocab.token(id).unwrap();
            let want = if tok.starts_with(&cfg.prefix_m) {
                Lang::Matrix
            } else if tok.starts_with(&cfg.prefix_e) {
                Lang::Embedded
            } else {
                Lang::Special
            };
            assert_eq!(tag, want, "{tok}");
        }
    }
    assert!(set.matrix.iter().all(|r| !r.tags.contains(&Lang::Embedded)));
    assert!(set.embedded.iter().all(|r| !r.tags.contains(&Lang::Matrix)));
    assert!(set
        .real_cs
        .iter()
        .any(|r| r.tags.contains(&Lang::Matrix) && r.tags.contains(&Lang::Embedded)));
}

#[test]
fn tagging_matches_table_lookup() {
    let vocab = Vocabulary::build(&["a b c shared"], &["x y z shared"], &["a x"], 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let ids: Vec<usize> = (0..8).map(|_| rng.random_range(0..vocab.size())).collect();
        let want: Vec<Lang> = ids
            .iter()
            .map(|&id| match vocab.lang(id).unwrap() {
                Lang::Shared => Lang::Embedded,
                l => l,
            })
            .collect();
        assert_eq!(vocab.tag_tokens(&ids, Lang::Embedded).unwrap(), want);
    }
}

#[test]
fn oov_tokens_become_unk() {
    let vocab = Vocabulary::build(&["a b"], &["x y"], &[] as &[&str], 1).unwrap();
    let r = vocab.encode_sentence("a never x", 45, Origin::RealCs);
    assert_eq!(r.ids[2], UNK);
    assert_eq!(r.tags[2], Lang::Special);
}

proptest! {
    #[test]
    fn encode_decode_encode_is_a_fixed_point(words in prop::collection::vec(0usize..6, 0..60), max_len in 2usize..50) {
        let lex = ["a", "b", "c", "x", "y", "z"];
        let vocab = Vocabulary::build(&["a b c"], &["x y z"], &[] as &[&str], 1).unwrap();
        let line = words.iter().map(|&w| lex[w]).collect::<Vec<_>>().join(" ");
        let first = vocab.encode_sentence(&line, max_len, Origin::MatrixCorpus);
        prop_assert!(first.ids.len() <= max_len);
        prop_assert_eq!(first.ids.len(), first.tags.len());
        let again = vocab.encode_sentence(&vocab.decode_text(&first.ids), max_len, Origin::MatrixCorpus);
        prop_assert_eq!(first, again);
    }
}
